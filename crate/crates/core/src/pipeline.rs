//! Detect-then-classify over a sequence of frames with per-species counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::{argmax, classifier_input, predict_probabilities};
use crate::data::{Checkpoint, Image};
use crate::detect::{BoundingBox, Detector};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    /// Grows each crop by this fraction of the box size on every side.
    pub crop_margin: f64,
    /// Expected classifier labels; checked against the checkpoint at startup.
    pub label_names: Option<Vec<String>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            nms_threshold: 0.45,
            crop_margin: 0.0,
            label_names: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub image: Image,
}

/// Frames from the image files of `dir` in file-name order; ids are stems.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm")) {
            paths.push(p);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            Ok(Frame {
                id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                image: Image::load(p)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class_name: String,
    pub class_index: usize,
    pub probabilities: Vec<f64>,
}

impl Classification {
    pub fn probability(&self) -> f64 {
        self.probabilities[self.class_index]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: String,
    /// Post-NMS boxes in frame coordinates with their objectness.
    pub detections: Vec<(BoundingBox, f64)>,
    /// One per detection, same order.
    pub classifications: Vec<Classification>,
    /// Only species that were seen.
    pub species_counts: BTreeMap<String, usize>,
}

pub struct Pipeline {
    detector: Detector,
    classifier: Model<f32>,
    class_names: Vec<String>,
    crop_margin: f64,
}

impl Pipeline {
    pub fn new(detector: Detector, classifier: Model<f32>, class_names: Vec<String>, config: &PipelineConfig) -> Result<Self> {
        if classifier.spec().class_count != class_names.len() {
            return Err(Error::Structural(format!(
                "classifier has {} outputs but {} class names",
                classifier.spec().class_count,
                class_names.len()
            )));
        }
        if let Some(expected) = &config.label_names {
            if expected != &class_names {
                return Err(Error::Structural(format!(
                    "classifier labels {class_names:?} do not match configured labels {expected:?}"
                )));
            }
        }
        if !(config.crop_margin >= 0.0) {
            return Err(Error::Config(format!("crop margin must be non-negative, got {}", config.crop_margin)));
        }
        Ok(Self {
            detector,
            classifier,
            class_names,
            crop_margin: config.crop_margin,
        })
    }

    pub fn from_checkpoints(detector: &Checkpoint, classifier: &Checkpoint, config: &PipelineConfig) -> Result<Self> {
        let det = Detector::from_checkpoint(detector, config.conf_threshold, config.nms_threshold)?;
        Self::new(det, classifier.to_model()?, classifier.class_names.clone(), config)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn crop_box(&self, b: &BoundingBox, image: &Image) -> BoundingBox {
        let mx = b.width() * self.crop_margin;
        let my = b.height() * self.crop_margin;
        BoundingBox {
            x_min: b.x_min - mx,
            y_min: b.y_min - my,
            x_max: b.x_max + mx,
            y_max: b.y_max + my,
        }
        .clamp(image.width as f64, image.height as f64)
    }

    pub fn process(&self, frame: &Frame) -> Result<FrameResult> {
        let dets = self.detector.detect(&frame.image)?;
        let size = self.classifier.spec().input_shape.width;
        let inputs: Vec<Vec<f32>> = dets
            .iter()
            .map(|d| classifier_input(&frame.image.crop(&self.crop_box(&d.bbox, &frame.image)), size))
            .collect();
        let probs = if inputs.is_empty() {
            Vec::new()
        } else {
            predict_probabilities(&self.classifier, &inputs)?
        };
        let mut species_counts = BTreeMap::new();
        let classifications: Vec<Classification> = probs
            .iter()
            .map(|p| {
                let k = argmax(p);
                *species_counts.entry(self.class_names[k].clone()).or_insert(0) += 1;
                Classification {
                    class_name: self.class_names[k].clone(),
                    class_index: k,
                    probabilities: p.iter().map(|&v| v as f64).collect(),
                }
            })
            .collect();
        Ok(FrameResult {
            frame_id: frame.id.clone(),
            detections: dets.iter().map(|d| (d.bbox, d.objectness)).collect(),
            classifications,
            species_counts,
        })
    }

    /// Processes frames concurrently; results are in input order.
    pub fn run(&self, frames: &[Frame]) -> Result<Vec<FrameResult>> {
        par::map_slice(frames, |f| self.process(f)).into_iter().collect()
    }
}

/// `frame_id,n_detections,<count per class>` with one row per frame.
pub fn counts_csv(results: &[FrameResult], class_names: &[String]) -> String {
    let mut s = String::from("frame_id,n_detections");
    for n in class_names {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for r in results {
        let _ = write!(s, "{},{}", r.frame_id, r.detections.len());
        for n in class_names {
            let _ = write!(s, ",{}", r.species_counts.get(n).copied().unwrap_or(0));
        }
        s.push('\n');
    }
    s
}

/// One row per detection.
pub fn detections_csv(results: &[FrameResult]) -> String {
    let mut s = String::from("frame_id,x_min,y_min,x_max,y_max,objectness,predicted_class,class_probability\n");
    for r in results {
        for ((b, obj), c) in r.detections.iter().zip(&r.classifications) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.frame_id,
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max,
                obj,
                c.class_name,
                c.probability()
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: &str, names: &[&str]) -> FrameResult {
        let mut counts = BTreeMap::new();
        for n in names {
            *counts.entry(n.to_string()).or_insert(0) += 1;
        }
        FrameResult {
            frame_id: id.into(),
            detections: names.iter().map(|_| (BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 0.5)).collect(),
            classifications: names
                .iter()
                .map(|n| Classification {
                    class_name: n.to_string(),
                    class_index: usize::from(*n == "b"),
                    probabilities: vec![0.75, 0.25],
                })
                .collect(),
            species_counts: counts,
        }
    }

    #[test]
    fn counts_table_has_a_column_per_class() {
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = counts_csv(&[result("f0", &["a", "b", "a"]), result("f1", &[])], &names);
        assert_eq!(csv, "frame_id,n_detections,a,b\nf0,3,2,1\nf1,0,0,0\n");
    }

    #[test]
    fn detail_rows_follow_detections() {
        let csv = detections_csv(&[result("f0", &["a"])]);
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "f0,1,2,3,4,0.5,a,0.75"
        );
    }
}
