//! Detector inference and the burn-in / accumulation training schedule.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, GridTargets};
use super::boxes::{BoundingBox, Detection};
use super::decode::{decode_grid, HeadGeometry};
use super::loss::{detection_loss, LossReport, LossWeights};
use super::nms::nms;
use crate::autograd::Tape;
use crate::data::{Checkpoint, Image, LabeledImage};
use crate::error::{contract, Error, Result};
use crate::metrics::{average_precision_50, moving_average, ScoredBox};
use crate::nn::{LayerSpec, Model, NetworkSpec};
use crate::optim::AdamState;
use crate::par;
use crate::tensor::{Element, Tensor};

/// Head geometries of a detector spec, in head order.
pub fn head_geometries(spec: &NetworkSpec) -> Result<Vec<HeadGeometry>> {
    let shapes = spec.infer_shapes()?;
    let mut out = Vec::new();
    for i in spec.detect_heads() {
        let LayerSpec::DetectHead { anchors, classes } = &spec.layers[i] else {
            unreachable!("detect_heads returns head layers")
        };
        let (gh, gw) = (shapes[i][1], shapes[i][2]);
        if spec.input_shape.width % gw != 0 || spec.input_shape.width / gw != spec.input_shape.height / gh {
            return Err(Error::Structural(format!("head {i}: grid {gh}x{gw} does not tile the input evenly")));
        }
        out.push(HeadGeometry {
            anchors: anchors.clone(),
            classes: *classes,
            stride: spec.input_shape.width / gw,
            grid_w: gw,
            grid_h: gh,
        });
    }
    if out.is_empty() {
        return Err(Error::Structural(format!("network {:?} has no detection head", spec.name)));
    }
    Ok(out)
}

/// Mapping from original image pixels to network input pixels:
/// `input = original * scale + offset` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputTransform {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl InputTransform {
    pub fn to_input(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: b.x_min * self.scale_x + self.offset_x,
            y_min: b.y_min * self.scale_y + self.offset_y,
            x_max: b.x_max * self.scale_x + self.offset_x,
            y_max: b.y_max * self.scale_y + self.offset_y,
        }
    }

    pub fn to_original(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: (b.x_min - self.offset_x) / self.scale_x,
            y_min: (b.y_min - self.offset_y) / self.scale_y,
            x_max: (b.x_max - self.offset_x) / self.scale_x,
            y_max: (b.y_max - self.offset_y) / self.scale_y,
        }
    }
}

/// Resizes to `size x size`, either by plain stretching or by
/// aspect-preserving letterboxing on mid-gray.
pub fn prepare_input(image: &Image, size: usize, letterbox: bool) -> (Image, InputTransform) {
    if !letterbox {
        let t = InputTransform {
            scale_x: size as f64 / image.width as f64,
            scale_y: size as f64 / image.height as f64,
            offset_x: 0.0,
            offset_y: 0.0,
        };
        return (image.resize(size, size), t);
    }
    let scale = (size as f64 / image.width as f64).min(size as f64 / image.height as f64);
    let nw = ((image.width as f64 * scale).round() as usize).clamp(1, size);
    let nh = ((image.height as f64 * scale).round() as usize).clamp(1, size);
    let (dx, dy) = ((size - nw) / 2, (size - nh) / 2);
    let resized = image.resize(nw, nh);
    let mut canvas = Image::filled(size, size, [128, 128, 128]);
    for y in 0..nh {
        let src = &resized.data[y * nw * 3..(y + 1) * nw * 3];
        let start = ((y + dy) * size + dx) * 3;
        canvas.data[start..start + nw * 3].copy_from_slice(src);
    }
    let t = InputTransform {
        scale_x: nw as f64 / image.width as f64,
        scale_y: nh as f64 / image.height as f64,
        offset_x: dx as f64,
        offset_y: dy as f64,
    };
    (canvas, t)
}

/// A trained detector ready for inference. Shareable across threads.
#[derive(Clone, Debug)]
pub struct Detector {
    model: Model<f32>,
    heads: Vec<HeadGeometry>,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub letterbox: bool,
}

impl Detector {
    pub fn new(model: Model<f32>, conf_threshold: f64, nms_threshold: f64) -> Result<Self> {
        let heads = head_geometries(model.spec())?;
        let s = &model.spec().input_shape;
        if s.width != s.height || s.channels != 3 {
            return Err(Error::Structural(format!("detector input must be square RGB, got {s:?}")));
        }
        Ok(Self {
            model,
            heads,
            conf_threshold,
            nms_threshold,
            letterbox: false,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, conf_threshold: f64, nms_threshold: f64) -> Result<Self> {
        Self::new(ckpt.to_model()?, conf_threshold, nms_threshold)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn input_size(&self) -> usize {
        self.model.spec().input_shape.width
    }

    /// Post-NMS detections in original image coordinates, clamped to the
    /// image, in descending score order.
    pub fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        Ok(self.detect_many(&[image])?.remove(0))
    }

    pub fn detect_many(&self, images: &[&Image]) -> Result<Vec<Vec<Detection>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let prepared: Vec<(Image, InputTransform)> =
                chunk.iter().map(|img| prepare_input(img, self.input_size(), self.letterbox)).collect();
            let refs: Vec<&Image> = prepared.iter().map(|p| &p.0).collect();
            let grids = self.model.predict_heads(crate::data::images_to_batch(&refs)?)?;
            for (i, (img, (_, t))) in chunk.iter().zip(&prepared).enumerate() {
                let mut dets = Vec::new();
                for (geom, grid) in self.heads.iter().zip(&grids) {
                    let per = geom.channels() * geom.cells();
                    dets.extend(decode_grid(&grid.data()[i * per..(i + 1) * per], geom, self.conf_threshold));
                }
                for d in &mut dets {
                    d.bbox = t.to_original(&d.bbox).clamp(img.width as f64, img.height as f64);
                }
                out.push(nms(&dets, self.nms_threshold));
            }
        }
        Ok(out)
    }
}

/// Schedule and evaluation settings for detector training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub batch_size: usize,
    pub subdivisions: usize,
    pub burn_in_iterations: usize,
    pub burn_in_lr: f64,
    /// Rate after burn-in.
    pub learning_rate: f64,
    pub total_iterations: usize,
    pub input_size: usize,
    pub eval_interval: usize,
    /// Score threshold for detections during mAP evaluation.
    pub eval_conf_threshold: f64,
    pub nms_threshold: f64,
    pub letterbox: bool,
    /// Draws each training image with a random horizontal and vertical flip.
    pub flips: bool,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Stop once validation mAP@50 reaches this value.
    pub target_map: Option<f64>,
    pub smoothing_window: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            subdivisions: 8,
            burn_in_iterations: 4000,
            burn_in_lr: 0.00025,
            learning_rate: 0.001,
            total_iterations: 50000,
            input_size: 608,
            eval_interval: 100,
            eval_conf_threshold: 0.005,
            nms_threshold: 0.45,
            letterbox: false,
            flips: false,
            loss_weights: LossWeights::default(),
            seed: 0,
            target_map: None,
            smoothing_window: 20,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.batch_size,
            self.subdivisions,
            self.total_iterations,
            self.input_size,
            self.eval_interval,
            self.smoothing_window,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("detector config has a zero size or count: {self:?}")));
        }
        if self.batch_size % self.subdivisions != 0 {
            return Err(Error::Config(format!(
                "batch size {} is not divisible by {} subdivisions",
                self.batch_size, self.subdivisions
            )));
        }
        if !(self.burn_in_lr > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if iteration < self.burn_in_iterations {
            self.burn_in_lr
        } else {
            self.learning_rate
        }
    }
}

/// A raw series with its trailing moving average.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub iterations: Vec<usize>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl Curve {
    fn push(&mut self, iteration: usize, value: f64) {
        self.iterations.push(iteration);
        self.raw.push(value);
    }

    fn smooth(&mut self, window: usize) {
        self.smoothed = moving_average(&self.raw, window);
    }

    /// `iteration,raw,moving_average` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,raw,moving_average\n");
        for ((i, r), m) in self.iterations.iter().zip(&self.raw).zip(&self.smoothed) {
            s.push_str(&format!("{i},{r},{m}\n"));
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorCurves {
    pub loss: Curve,
    /// Mean IoU of decoded predictions with their assigned truths.
    pub iou: Curve,
    pub map50: Curve,
}

#[derive(Clone, Debug)]
pub struct DetectorTraining {
    pub best: Checkpoint,
    pub best_iteration: usize,
    pub best_map50: f64,
    pub iterations_run: usize,
    pub curves: DetectorCurves,
}

/// Network input and assigned targets for one training image.
#[derive(Clone, Debug)]
pub struct PreparedSample<T: Element> {
    pub input: Vec<T>,
    pub targets: Vec<GridTargets>,
}

pub fn prepare_sample<T: Element>(
    image: &Image,
    boxes: &[BoundingBox],
    heads: &[HeadGeometry],
    input_size: usize,
    letterbox: bool,
) -> Result<PreparedSample<T>> {
    let (resized, t) = prepare_input(image, input_size, letterbox);
    let s = input_size as f64;
    let scaled: Vec<BoundingBox> = boxes.iter().map(|b| t.to_input(b).clamp(s, s)).collect();
    Ok(PreparedSample {
        input: resized.to_chw(),
        targets: assign_targets(&scaled, heads)?,
    })
}

/// Forward/backward over `samples` in `subdivisions` equal sub-batches,
/// adding `d(mean loss)/d(param)` into each parameter's gradient buffer.
pub fn accumulate_gradients<T: Element>(
    model: &mut Model<T>,
    samples: &[&PreparedSample<T>],
    subdivisions: usize,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    if samples.is_empty() || subdivisions == 0 || samples.len() % subdivisions != 0 {
        return Err(contract(
            "accumulate_gradients",
            format!("{} samples do not split into {subdivisions} sub-batches", samples.len()),
        ));
    }
    let s = &model.spec().input_shape;
    let dims = [3, s.height, s.width];
    let sub = samples.len() / subdivisions;
    let scale = 1.0 / subdivisions as f64;
    let mut report = LossReport::default();
    for chunk in samples.chunks(sub) {
        let mut data = Vec::with_capacity(chunk.len() * dims.iter().product::<usize>());
        for p in chunk {
            data.extend_from_slice(&p.input);
        }
        let batch = Tensor::new(vec![chunk.len(), dims[0], dims[1], dims[2]], data)?;
        let targets: Vec<Vec<GridTargets>> = chunk.iter().map(|p| p.targets.clone()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let fwd = model.forward_train(&mut tape, x, rng)?;
        let (loss, rep) = detection_loss(&mut tape, &fwd.heads, &targets, weights)?;
        let grads = tape.backward(loss)?;
        model.accumulate_grads(&grads, &fwd.params, T::of(scale))?;
        report.add_scaled(&rep, scale);
    }
    Ok(report)
}

/// Variant 0 is the identity, bit 0 flips horizontally, bit 1 vertically.
fn flipped(image: &Image, boxes: &[BoundingBox], variant: usize) -> (Image, Vec<BoundingBox>) {
    let (w, h) = (image.width as f64, image.height as f64);
    let mut img = image.clone();
    let mut boxes = boxes.to_vec();
    if variant & 1 == 1 {
        img = img.flip_horizontal();
        for b in &mut boxes {
            (b.x_min, b.x_max) = (w - b.x_max, w - b.x_min);
        }
    }
    if variant & 2 == 2 {
        img = img.flip_vertical();
        for b in &mut boxes {
            (b.y_min, b.y_max) = (h - b.y_max, h - b.y_min);
        }
    }
    (img, boxes)
}

/// Validation mAP@50 of `detector` on annotated samples.
pub fn evaluate_map50(detector: &Detector, samples: &[LabeledImage]) -> Result<Option<f64>> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let truths: Vec<Vec<BoundingBox>> = samples
        .iter()
        .map(|s| s.boxes().map(<[BoundingBox]>::to_vec).ok_or_else(|| Error::Data(format!("{:?} has no boxes", s.id))))
        .collect::<Result<_>>()?;
    let chunks: Vec<&[&Image]> = images.chunks(8).collect();
    let per_chunk = par::map_slice(&chunks, |c| detector.detect_many(c));
    let mut scored = Vec::new();
    let mut idx = 0;
    for dets in per_chunk {
        for frame in dets? {
            scored.extend(frame.into_iter().map(|d| ScoredBox {
                image: idx,
                bbox: d.bbox,
                score: d.score(),
            }));
            idx += 1;
        }
    }
    Ok(average_precision_50(&scored, &truths))
}

/// Trains `model` on `train`, evaluating mAP@50 on `val` every
/// `eval_interval` iterations and after the last one. Returns the
/// best-scoring evaluation's weights (earliest on ties).
pub fn train_detector(
    mut model: Model<f32>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: &DetectorTrainConfig,
) -> Result<DetectorTraining> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("detector training needs non-empty train and validation sets".into()));
    }
    let heads = head_geometries(model.spec())?;
    if model.spec().input_shape.width != config.input_size {
        return Err(Error::Config(format!(
            "model input {} differs from configured input size {}",
            model.spec().input_shape.width,
            config.input_size
        )));
    }
    let variants = if config.flips { 4 } else { 1 };
    let prepared: Vec<PreparedSample<f32>> = par::map_range(train.len() * variants, |j| {
        let s = &train[j / variants];
        let boxes = s.boxes().ok_or_else(|| Error::Data(format!("{:?} has no boxes", s.id)))?;
        let (image, boxes) = flipped(&s.image, boxes, j % variants);
        prepare_sample(&image, &boxes, &heads, config.input_size, config.letterbox)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = AdamState::new(config.burn_in_lr);
    let mut curves = DetectorCurves::default();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let started = Instant::now();
    let mut iterations_run = 0;

    for it in 0..config.total_iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let variant = if variants > 1 { rng.random_range(0..variants) } else { 0 };
            batch.push(&prepared[order[cursor] * variants + variant]);
            cursor += 1;
        }
        model.zero_grads();
        let rep = accumulate_gradients(&mut model, &batch, config.subdivisions, &config.loss_weights, &mut rng)?;
        adam.learning_rate = config.learning_rate_at(it);
        adam.step(model.parameters_mut())?;
        iterations_run = it + 1;
        curves.loss.push(iterations_run, rep.total);
        if let Some(v) = rep.mean_iou() {
            curves.iou.push(iterations_run, v);
        }

        if iterations_run % config.eval_interval == 0 || iterations_run == config.total_iterations {
            let detector = Detector {
                letterbox: config.letterbox,
                ..Detector::new(model.clone(), config.eval_conf_threshold, config.nms_threshold)?
            };
            let map = evaluate_map50(&detector, val)?.unwrap_or(0.0);
            curves.map50.push(iterations_run, map);
            log::info!(
                "iteration {iterations_run}: loss {:.4}, mAP@50 {map:.4}, {:.0}s",
                rep.total,
                started.elapsed().as_secs_f64()
            );
            if best.as_ref().is_none_or(|(_, m, _)| map > *m) {
                best = Some((iterations_run, map, model.clone()));
            }
            if config.target_map.is_some_and(|t| map >= t) {
                break;
            }
        }
    }
    for c in [&mut curves.loss, &mut curves.iou, &mut curves.map50] {
        c.smooth(config.smoothing_window);
    }
    let (best_iteration, best_map50, best_model) = best.expect("at least one evaluation runs");
    let mut meta = BTreeMap::new();
    meta.insert("iteration".into(), serde_json::json!(best_iteration));
    meta.insert("map50".into(), serde_json::json!(best_map50));
    meta.insert("seed".into(), serde_json::json!(config.seed));
    Ok(DetectorTraining {
        best: Checkpoint::from_model(&best_model, vec!["fish".into()], meta),
        best_iteration,
        best_map50,
        iterations_run,
        curves,
    })
}

/// Index of the first maximum; the evaluation a best-checkpoint policy keeps.
pub fn best_evaluation(maps: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in maps.iter().enumerate() {
        if best.is_none_or(|b| m > maps[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_tiny_detector, TINY_ANCHORS};

    #[test]
    fn best_evaluation_is_argmax() {
        assert_eq!(best_evaluation(&[0.3, 0.7, 0.5]), Some(1));
        assert_eq!(best_evaluation(&[0.4, 0.4]), Some(0));
        assert_eq!(best_evaluation(&[]), None);
    }

    #[test]
    fn burn_in_schedule() {
        let c = DetectorTrainConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.00025);
        assert_eq!(c.learning_rate_at(3999), 0.00025);
        assert_eq!(c.learning_rate_at(4000), 0.001);
        assert!(c.validate().is_ok());
        let bad = DetectorTrainConfig {
            batch_size: 60,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn letterbox_transform_inverts() {
        let img = Image::filled(40, 20, [9, 9, 9]);
        let (canvas, t) = prepare_input(&img, 32, true);
        assert_eq!((canvas.width, canvas.height), (32, 32));
        assert_eq!(canvas.pixel(0, 0), [128, 128, 128]);
        assert_eq!(canvas.pixel(16, 16), [9, 9, 9]);
        let b = BoundingBox::new(4.0, 2.0, 30.0, 18.0).unwrap();
        let back = t.to_original(&t.to_input(&b));
        assert!((back.x_max - b.x_max).abs() < 1e-9 && (back.y_min - b.y_min).abs() < 1e-9);
    }

    #[test]
    fn detections_stay_inside_the_frame() {
        let spec = build_tiny_detector(32, &TINY_ANCHORS, &[4, 4, 4, 4, 4]).unwrap();
        let mut model = Model::<f32>::new(spec, 1).unwrap();
        // Push every objectness logit up so raw boxes (anchors larger than
        // the frame) are emitted and must be clamped.
        let last = model.parameters().len() - 1;
        for (i, v) in model.parameters_mut()[last].tensor.data_mut().iter_mut().enumerate() {
            *v = if i % 6 >= 4 { 5.0 } else { 3.0 };
        }
        let det = Detector::new(model, 0.1, 1.0).unwrap();
        let img = Image::filled(50, 30, [100, 100, 100]);
        let dets = det.detect(&img).unwrap();
        assert!(!dets.is_empty());
        for d in dets {
            let b = d.bbox;
            assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 50.0 && b.y_max <= 30.0, "{b:?}");
        }
    }
}
