//! Classifier pre-training, transfer post-training, and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Checkpoint, DatasetSplit, Image, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{build_cnn_senet_with, replace_head, CnnSenetOptions, Model};
use crate::optim::AdamState;
use crate::par;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    /// Weights of the epoch with the highest validation accuracy (earliest on ties).
    BestValidation,
    FinalEpoch,
}

impl std::str::FromStr for CheckpointSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best_validation" => Ok(Self::BestValidation),
            "final_epoch" => Ok(Self::FinalEpoch),
            other => Err(Error::Config(format!("unknown checkpoint selection {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_selection: CheckpointSelection,
    /// Per-class loss weights; none by default.
    pub class_weights: Option<Vec<f64>>,
    /// Stop early once the running training accuracy of an epoch reaches this.
    pub target_train_accuracy: Option<f64>,
}

impl TrainConfig {
    /// 50 epochs, batch 16, best-validation selection.
    pub fn pretrain() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 0,
            checkpoint_selection: CheckpointSelection::BestValidation,
            class_weights: None,
            target_train_accuracy: None,
        }
    }

    /// 50 epochs, batch 8, final-epoch selection.
    pub fn posttrain() -> Self {
        Self {
            batch_size: 8,
            checkpoint_selection: CheckpointSelection::FinalEpoch,
            ..Self::pretrain()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy of the training-mode predictions seen during the epoch.
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt(self.val_loss),
            opt(self.val_acc),
            self.wall_seconds
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub class_names: Vec<String>,
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), serde_json::json!(self.selected_epoch));
        meta.insert("seed".into(), serde_json::json!(seed));
        if let Some(m) = self.history.get(self.selected_epoch.wrapping_sub(1)) {
            meta.insert("train_acc".into(), serde_json::json!(m.train_acc));
            if let Some(v) = m.val_acc {
                meta.insert("val_acc".into(), serde_json::json!(v));
            }
        }
        Checkpoint::from_model(&self.model, self.class_names.clone(), meta)
    }
}

/// Resized, normalized CHW input for each sample.
pub fn prepare_inputs(samples: &[LabeledImage], size: usize) -> Vec<Vec<f32>> {
    par::map_slice(samples, |s| classifier_input(&s.image, size))
}

pub fn classifier_input(image: &Image, size: usize) -> Vec<f32> {
    image.resize(size, size).to_chw()
}

fn labels(samples: &[LabeledImage], classes: usize) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.class() {
            Some(c) if c < classes => Ok(c),
            _ => Err(Error::Data(format!("sample {:?} has no class label below {classes}", s.id))),
        })
        .collect()
}

fn batch_tensor(inputs: &[Vec<f32>], idx: &[usize], size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(idx.len() * 3 * size * size);
    for &i in idx {
        data.extend_from_slice(&inputs[i]);
    }
    Tensor::new(vec![idx.len(), 3, size, size], data)
}

fn one_hot(idx: &[usize], labels: &[usize], classes: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[idx.len(), classes]);
    for (r, &i) in idx.iter().enumerate() {
        t.data_mut()[r * classes + labels[i]] = 1.0;
    }
    t
}

/// Consecutive batches over `order`; a trailing batch of one sample is merged
/// into the previous batch because batch norm needs two values per channel.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Class probabilities for each input, in input order.
pub fn predict_probabilities(model: &Model<f32>, inputs: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
    let size = model.spec().input_shape.width;
    let classes = model.spec().class_count;
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(16).collect();
    let parts = par::map_slice(&chunks, |c| model.predict(batch_tensor(inputs, c, size)?));
    let mut out = Vec::with_capacity(inputs.len());
    for p in parts {
        let p = p?;
        out.extend(p.data().chunks(classes).map(<[f32]>::to_vec));
    }
    Ok(out)
}

fn mean_loss_and_accuracy(probs: &[Vec<f32>], labels: &[usize]) -> (f64, f64) {
    let n = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, &y) in probs.iter().zip(labels) {
        loss -= (p[y] as f64).clamp(1e-7, 1.0 - 1e-7).ln();
        if argmax(p) == y {
            correct += 1;
        }
    }
    (loss / n, correct as f64 / n)
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` on `split.train` with Adam and categorical cross-entropy,
/// validating once per epoch on `split.val`.
pub fn train_classifier(mut model: Model<f32>, split: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = model.spec().class_count;
    if split.class_names.len() != classes {
        return Err(Error::Structural(format!(
            "network has {classes} outputs, dataset has {} classes",
            split.class_names.len()
        )));
    }
    if split.train.len() < 2 {
        return Err(Error::Data("training needs at least two samples".into()));
    }
    if config.checkpoint_selection == CheckpointSelection::BestValidation && split.val.is_empty() {
        return Err(Error::Data("best-validation selection needs a validation split".into()));
    }
    let weights: Option<Vec<f32>> = match &config.class_weights {
        Some(w) if w.len() != classes => {
            return Err(Error::Config(format!("{} class weights for {classes} classes", w.len())))
        }
        Some(w) => Some(w.iter().map(|&v| v as f32).collect()),
        None => None,
    };
    let size = model.spec().input_shape.width;
    let train_inputs = prepare_inputs(&split.train, size);
    let train_labels = labels(&split.train, classes)?;
    let val_inputs = prepare_inputs(&split.val, size);
    let val_labels = labels(&split.val, classes)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut adam = AdamState::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train_inputs.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let started = Instant::now();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for b in batches(&order, config.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&train_inputs, b, size)?);
            let fwd = model.forward_train(&mut tape, x, &mut dropout_rng)?;
            let target = one_hot(b, &train_labels, classes);
            let loss = tape.categorical_cross_entropy(fwd.output, &target, weights.as_deref())?;
            let probs = tape.value(fwd.output).clone();
            loss_sum += tape.value(loss).data()[0] as f64 * b.len() as f64;
            for (r, &i) in probs.argmax_rows().iter().zip(b) {
                correct += usize::from(*r == train_labels[i]);
            }
            seen += b.len();
            let grads = tape.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&grads, &fwd.params, 1.0)?;
            adam.step(model.parameters_mut())?;
        }
        let (val_loss, val_acc) = if val_inputs.is_empty() {
            (None, None)
        } else {
            let (l, a) = mean_loss_and_accuracy(&predict_probabilities(&model, &val_inputs)?, &val_labels);
            (Some(l), Some(a))
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: {}", m.csv_row());
        history.push(m);
        if config.checkpoint_selection == CheckpointSelection::BestValidation {
            let acc = val_acc.expect("validation split checked above");
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
        if config.target_train_accuracy.is_some_and(|t| m.train_acc >= t) {
            break;
        }
    }
    let (model, selected_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => (model, history.len()),
    };
    Ok(TrainOutcome {
        model,
        class_names: split.class_names.clone(),
        history,
        selected_epoch,
    })
}

/// Trains a fresh CNN-SENet on `split`, keeping the best-validation epoch.
pub fn pretrain(split: &DatasetSplit, options: &CnnSenetOptions, config: &TrainConfig) -> Result<TrainOutcome> {
    if split.class_names.len() < 2 {
        return Err(Error::Data("pre-training needs at least two classes".into()));
    }
    if config.checkpoint_selection != CheckpointSelection::BestValidation {
        return Err(Error::Config("pre-training keeps the best-validation epoch".into()));
    }
    let spec = build_cnn_senet_with(&CnnSenetOptions {
        class_count: split.class_names.len(),
        batch_size: config.batch_size,
        ..options.clone()
    })?;
    train_classifier(Model::new(spec, config.seed)?, split, config)
}

/// Loads `pretrained`, replaces its head to fit `split`'s classes, and
/// trains; all weights before the head start from the checkpoint.
pub fn posttrain(pretrained: &Checkpoint, split: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    let source = pretrained.to_model()?;
    let model = replace_head(&source, split.class_names.len(), derive_seed(config.seed, 2))?;
    train_classifier(model, split, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub true_class: usize,
    pub predicted_class: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<PredictionRecord>,
}

impl EvaluationReport {
    pub fn from_predictions(class_names: Vec<String>, predictions: Vec<PredictionRecord>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Data("evaluation needs at least one test sample".into()));
        }
        let k = class_names.len();
        let mut confusion = vec![vec![0; k]; k];
        let mut correct = 0;
        for p in &predictions {
            if p.true_class >= k || p.predicted_class >= k {
                return Err(Error::Data(format!("prediction {p:?} outside {k} classes")));
            }
            confusion[p.true_class][p.predicted_class] += 1;
            correct += usize::from(p.true_class == p.predicted_class);
        }
        Ok(Self {
            class_names,
            accuracy: correct as f64 / predictions.len() as f64,
            confusion,
            predictions,
        })
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for n in &self.class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.confusion) {
            s.push_str(n);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("id,true_class,predicted_class,probability\n");
        for p in &self.predictions {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                p.id, self.class_names[p.true_class], self.class_names[p.predicted_class], p.probability
            );
        }
        s
    }
}

/// Accuracy and confusion matrix of `model` on `test`.
pub fn evaluate(model: &Model<f32>, class_names: &[String], test: &[LabeledImage]) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::Data("evaluation needs at least one test sample".into()));
    }
    if class_names.len() != model.spec().class_count {
        return Err(Error::Structural(format!(
            "{} class names for a {}-output network",
            class_names.len(),
            model.spec().class_count
        )));
    }
    let truth = labels(test, class_names.len())?;
    let probs = predict_probabilities(model, &prepare_inputs(test, model.spec().input_shape.width))?;
    let predictions = test
        .iter()
        .zip(truth)
        .zip(&probs)
        .map(|((s, t), p)| {
            let k = argmax(p);
            PredictionRecord {
                id: s.id.clone(),
                true_class: t,
                predicted_class: k,
                probability: p[k] as f64,
            }
        })
        .collect();
    EvaluationReport::from_predictions(class_names.to_vec(), predictions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedRuns {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

/// Runs `experiment(seed)` for seeds `seed..seed + n` and averages.
pub fn run_repeated(n: usize, seed: u64, mut experiment: impl FnMut(u64) -> Result<f64>) -> Result<RepeatedRuns> {
    if n == 0 {
        return Err(Error::Config("repeated runs need n >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed + i).collect();
    let accuracies = seeds.iter().map(|&s| experiment(s)).collect::<Result<Vec<f64>>>()?;
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    Ok(RepeatedRuns { seeds, accuracies, mean })
}
