//! Command-line grammar and the `--config` file merge.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "fishnet", version, about = "Fish detection and species classification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Plain-text `key = value` file; keys are long flag names. Flags given
    /// on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory; `out` unless given. Replay defaults to the
    /// manifest's directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train CNN-SENet from scratch, keeping the best-validation epoch.
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Replace the classifier head of a pretrained checkpoint and fine-tune.
    #[command(args_override_self = true)]
    Posttrain(PosttrainArgs),
    /// Train the fish detector, keeping the best validation mAP@50.
    #[command(args_override_self = true)]
    TrainDetector(TrainDetectorArgs),
    /// Accuracy and confusion matrix of a classifier checkpoint.
    #[command(args_override_self = true)]
    EvaluateClassifier(EvaluateClassifierArgs),
    /// mAP@50, precision-recall curve, and average IoU of a detector checkpoint.
    #[command(args_override_self = true)]
    EvaluateDetector(EvaluateDetectorArgs),
    /// Split a classification dataset and expand its training part.
    #[command(args_override_self = true)]
    Augment(AugmentArgs),
    /// Detect, crop, classify, and count fish in a directory of frames.
    #[command(args_override_self = true)]
    RunPipeline(RunPipelineArgs),
    /// Write a synthetic classification or detection dataset.
    #[command(args_override_self = true)]
    GenSynthetic(GenSyntheticArgs),
    /// Finite-difference check of every differentiable op.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Re-run a recorded command and compare its outputs with the manifest.
    #[command(args_override_self = true)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Posttrain(_) => "posttrain",
            Command::TrainDetector(_) => "train-detector",
            Command::EvaluateClassifier(_) => "evaluate-classifier",
            Command::EvaluateDetector(_) => "evaluate-detector",
            Command::Augment(_) => "augment",
            Command::RunPipeline(_) => "run-pipeline",
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay(_) => "replay",
        }
    }
}

pub const SUBCOMMANDS: &[&str] = &[
    "pretrain",
    "posttrain",
    "train-detector",
    "evaluate-classifier",
    "evaluate-detector",
    "augment",
    "run-pipeline",
    "gen-synthetic",
    "gradcheck",
    "replay",
];

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Split the pooled dataset instead of each class separately.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ClassifierTrainArgs {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Stop once an epoch's running training accuracy reaches this.
    #[arg(long)]
    pub target_train_accuracy: Option<f64>,
    /// Per-class loss weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Classification dataset root with one subdirectory per class.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: ClassifierTrainArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 200)]
    pub input_size: usize,
    #[arg(long, default_value_t = 16)]
    pub se_ratio: usize,
    /// Build the ablation network without SE blocks.
    #[arg(long)]
    pub no_se: bool,
    /// Add the block input back after SE recalibration.
    #[arg(long)]
    pub se_residual: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    BestValidation,
    FinalEpoch,
}

#[derive(Args, Debug, Clone)]
pub struct AugmentOptions {
    #[arg(long, default_value_t = 20.0)]
    pub rotation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub shift: f64,
    #[arg(long, default_value_t = 0.9)]
    pub scale_min: f64,
    #[arg(long, default_value_t = 1.1)]
    pub scale_max: f64,
    #[arg(long, default_value_t = 10.0)]
    pub shear: f64,
    #[arg(long, default_value_t = 0.5)]
    pub flip_probability: f64,
    #[arg(long, default_value_t = 2)]
    pub expansion_factor: usize,
}

#[derive(Args, Debug)]
pub struct PosttrainArgs {
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: ClassifierTrainArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, value_enum, default_value_t = Selection::FinalEpoch)]
    pub selection: Selection,
    /// Expand the training split with augmented copies before training.
    #[arg(long)]
    pub augment: bool,
    #[command(flatten)]
    pub augmentation: AugmentOptions,
    /// Repeat with seeds seed, seed+1, ... and report the mean test accuracy.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Draw a new split for every repeat instead of reusing the first.
    #[arg(long)]
    pub resample_splits: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Darknet53,
}

#[derive(Args, Debug)]
pub struct TrainDetectorArgs {
    /// Detection dataset root with `images/` and `labels/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    /// Network input edge; defaults to 128 for tiny and 608 for darknet53.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub subdivisions: usize,
    #[arg(long, default_value_t = 4000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 0.00025)]
    pub burn_in_lr: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_interval: usize,
    /// Stop once validation mAP@50 reaches this.
    #[arg(long)]
    pub target_map: Option<f64>,
    /// Random horizontal and vertical flips of training images.
    #[arg(long)]
    pub flips: bool,
    #[arg(long)]
    pub letterbox: bool,
    #[arg(long, default_value_t = 20)]
    pub smoothing_window: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvaluateClassifierArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which part of the seeded 70/15/15 split to evaluate.
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateDetectorArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which part of the seeded 70/30 split to evaluate.
    #[arg(long, value_enum, default_value_t = Part::Val)]
    pub part: Part,
    /// Score threshold for the precision-recall curve and mAP.
    #[arg(long, default_value_t = 0.005)]
    pub conf: f64,
    /// Score threshold for the reported detections and average IoU.
    #[arg(long, default_value_t = 0.25)]
    pub report_conf: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms: f64,
    #[arg(long)]
    pub letterbox: bool,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub augmentation: AugmentOptions,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value = "png")]
    pub format: String,
}

#[derive(Args, Debug)]
pub struct RunPipelineArgs {
    /// Directory of frames, processed in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub conf: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms: f64,
    /// Grow crops by this fraction of the box size on every side.
    #[arg(long, default_value_t = 0.0)]
    pub crop_margin: f64,
    /// Expected classifier labels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[arg(long)]
    pub letterbox: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Classification,
    Detection,
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Classification classes, or species painted into detection frames.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    /// Defaults to 200 for classification and 128 for detection.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub min_fish: usize,
    #[arg(long, default_value_t = 4)]
    pub max_fish: usize,
    /// Detection only: each crop edge in `crops/` moves by up to this
    /// fraction of the box extent.
    #[arg(long, default_value_t = 0.2)]
    pub crop_jitter: f64,
    #[arg(long, default_value = "png")]
    pub format: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str, path: &Path) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), n + 1))?;
        let k = k.trim().replace('_', "-");
        if k == "config" {
            return Err(format!("{}:{}: config files cannot nest", path.display(), n + 1));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Finds `--config FILE` or `--config=FILE` in raw arguments.
pub fn find_config(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Drops `--config FILE` / `--config=FILE` from raw arguments.
pub fn strip_config(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--config" {
            skip = true;
        } else if !a.starts_with("--config=") {
            out.push(a.clone());
        }
    }
    out
}

/// Rebuilds `argv` as `prog subcommand <file settings> <user flags>` so that
/// command-line flags, which come later, override file settings.
pub fn merge_config(argv: &[String], settings: &[(String, String)]) -> Vec<String> {
    let Some(pos) = argv.iter().skip(1).position(|a| SUBCOMMANDS.contains(&a.as_str())).map(|p| p + 1) else {
        return argv.to_vec();
    };
    let mut out = vec![argv[0].clone(), argv[pos].clone()];
    for (k, v) in settings {
        match v.as_str() {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.push(v.clone());
            }
        }
    }
    out.extend(argv[1..pos].iter().cloned());
    out.extend(argv[pos + 1..].iter().cloned());
    out
}
