//! One function per subcommand. Each reads its inputs, writes files through
//! [`Run`], and prints a short summary.

use std::fmt::Write as _;

use fishnet::augment::{expand_dataset, AugmentConfig};
use fishnet::classify::{self, CheckpointSelection, EvaluationReport, TrainConfig, TrainOutcome};
use fishnet::data::synthetic::{
    generate_classification, generate_detection, species_crops, ClassificationSynth, DetectionSynth,
};
use fishnet::data::{
    load_classification_dataset, load_detection_dataset, save_classification_dataset, save_detection_dataset,
    split, Checkpoint, Dataset, DatasetSplit, LabeledImage, SplitFractions,
};
use fishnet::detect::{train_detector, Detector, DetectorTrainConfig};
use fishnet::gradcheck;
use fishnet::metrics::{average_iou, average_precision_50, pr_curve, ImageBoxes, ScoredBox};
use fishnet::nn::{build_detector_backbone_at, build_tiny_detector, CnnSenetOptions, DetectorPreset, Model, TINY_ANCHORS};
use fishnet::pipeline::{counts_csv, detections_csv, load_frames, Pipeline, PipelineConfig};
use fishnet::seeds::derive_seed;

use crate::args::*;
use crate::manifest::Run;
use crate::CliError;

fn split_csv(s: &DatasetSplit) -> String {
    let mut out = String::from("id,part\n");
    for (part, name) in [(&s.train, "train"), (&s.val, "val"), (&s.test, "test")] {
        for x in part {
            let _ = writeln!(out, "{},{name}", x.id);
        }
    }
    out
}

fn train_config(a: &ClassifierTrainArgs, defaults: TrainConfig, seed: u64, selection: CheckpointSelection) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.lr,
        seed,
        checkpoint_selection: selection,
        class_weights: a.class_weights.clone(),
        target_train_accuracy: a.target_train_accuracy,
    }
}

fn write_evaluation(run: &mut Run, prefix: &str, report: &EvaluationReport) -> Result<(), CliError> {
    run.write(&format!("{prefix}confusion.csv"), report.confusion_csv().as_bytes())?;
    run.write(&format!("{prefix}predictions.csv"), report.predictions_csv().as_bytes())?;
    Ok(())
}

fn write_training(run: &mut Run, prefix: &str, name: &str, outcome: &TrainOutcome) -> Result<(), CliError> {
    let ckpt = outcome.checkpoint(run.seed);
    run.write(&format!("{prefix}{name}"), &ckpt.to_bytes()?)?;
    run.write_volatile(
        &format!("{prefix}metrics.csv"),
        &classify::metrics_csv(&outcome.history),
        &["wall_seconds"],
    )?;
    Ok(())
}

fn classification_split(run: &mut Run, data: &std::path::Path, seed: u64, s: &SplitArgs) -> Result<DatasetSplit, CliError> {
    run.input(data)?;
    let ds = load_classification_dataset(data)?;
    Ok(split(&ds, SplitFractions::CLASSIFICATION, seed, !s.no_stratify)?)
}

pub fn pretrain(run: &mut Run, a: &PretrainArgs) -> Result<(), CliError> {
    let sp = classification_split(run, &a.data, run.seed, &a.split)?;
    run.write("split.csv", split_csv(&sp).as_bytes())?;
    let opts = CnnSenetOptions {
        input_size: a.input_size,
        se_ratio: a.se_ratio,
        with_se: !a.no_se,
        se_residual: a.se_residual,
        ..CnnSenetOptions::new(sp.class_names.len())
    };
    let cfg = train_config(&a.train, TrainConfig::pretrain(), run.seed, CheckpointSelection::BestValidation);
    let outcome = classify::pretrain(&sp, &opts, &cfg)?;
    write_training(run, "", "pretrained.fnck", &outcome)?;
    println!(
        "pretrained {} classes on {} images; kept epoch {} of {}",
        sp.class_names.len(),
        sp.train.len(),
        outcome.selected_epoch,
        outcome.history.len()
    );
    if !sp.test.is_empty() {
        let report = classify::evaluate(&outcome.model, &outcome.class_names, &sp.test)?;
        write_evaluation(run, "", &report)?;
        println!("test accuracy {:.4} on {} images", report.accuracy, sp.test.len());
    }
    Ok(())
}

fn augment_config(a: &AugmentOptions) -> AugmentConfig {
    AugmentConfig {
        rotation_range_degrees: a.rotation,
        shift_fraction: a.shift,
        scale_range: (a.scale_min, a.scale_max),
        shear_degrees: a.shear,
        flip_probability: a.flip_probability,
        expansion_factor: a.expansion_factor,
    }
}

pub fn posttrain(run: &mut Run, a: &PosttrainArgs) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    run.input(&a.pretrained)?;
    let pretrained = Checkpoint::load(&a.pretrained)?;
    run.input(&a.data)?;
    let ds = load_classification_dataset(&a.data)?;
    let selection = match a.selection {
        Selection::BestValidation => CheckpointSelection::BestValidation,
        Selection::FinalEpoch => CheckpointSelection::FinalEpoch,
    };
    let base = run.seed;
    let mut runs_csv = String::from("run,seed,epochs,test_accuracy\n");
    let mut run_error: Option<CliError> = None;
    let repeated = classify::run_repeated(a.runs, base, |seed| {
        let r = (seed - base) as usize;
        let prefix = if a.runs == 1 { String::new() } else { format!("run_{r}/") };
        let split_seed = if a.resample_splits { seed } else { base };
        let mut sp = split(&ds, SplitFractions::CLASSIFICATION, split_seed, !a.split.no_stratify)?;
        if a.augment {
            sp = expand_dataset(&sp, &augment_config(&a.augmentation), derive_seed(seed, 7))?;
        }
        let cfg = train_config(&a.train, TrainConfig::posttrain(), seed, selection);
        let outcome = classify::posttrain(&pretrained, &sp, &cfg)?;
        let report = classify::evaluate(&outcome.model, &outcome.class_names, &sp.test)?;
        let io = (|| {
            run.write(&format!("{prefix}split.csv"), split_csv(&sp).as_bytes())?;
            write_training(run, &prefix, "posttrained.fnck", &outcome)?;
            write_evaluation(run, &prefix, &report)
        })();
        if let Err(e) = io {
            run_error = Some(e);
            return Err(fishnet::Error::Data("could not write run outputs".into()));
        }
        let _ = writeln!(runs_csv, "{r},{seed},{},{}", outcome.history.len(), report.accuracy);
        println!(
            "run {r} (seed {seed}): {} training images, test accuracy {:.4}",
            sp.train.len(),
            report.accuracy
        );
        Ok(report.accuracy)
    });
    if let Some(e) = run_error {
        return Err(e);
    }
    let repeated = repeated?;
    if a.runs > 1 {
        let _ = writeln!(runs_csv, "mean,,,{}", repeated.mean);
        run.write("runs.csv", runs_csv.as_bytes())?;
        println!("mean test accuracy over {} runs: {:.4}", a.runs, repeated.mean);
    }
    Ok(())
}

fn detection_split(run: &mut Run, data: &std::path::Path) -> Result<DatasetSplit, CliError> {
    run.input(data)?;
    let ds = load_detection_dataset(data)?;
    Ok(split(&ds, SplitFractions::DETECTION, run.seed, false)?)
}

pub fn train_detector_cmd(run: &mut Run, a: &TrainDetectorArgs) -> Result<(), CliError> {
    let sp = detection_split(run, &a.data)?;
    run.write("split.csv", split_csv(&sp).as_bytes())?;
    let (preset, default_size) = match a.preset {
        Preset::Tiny => (DetectorPreset::Tiny, 128),
        Preset::Darknet53 => (DetectorPreset::Darknet53, 608),
    };
    let input_size = a.input_size.unwrap_or(default_size);
    let spec = match preset {
        DetectorPreset::Tiny => build_tiny_detector(input_size, &TINY_ANCHORS, &[16, 32, 64, 64, 128])?,
        other => build_detector_backbone_at(other, input_size)?,
    };
    let cfg = DetectorTrainConfig {
        batch_size: a.batch_size,
        subdivisions: a.subdivisions,
        burn_in_iterations: a.burn_in,
        burn_in_lr: a.burn_in_lr,
        learning_rate: a.lr,
        total_iterations: a.iterations,
        input_size,
        eval_interval: a.eval_interval,
        letterbox: a.letterbox,
        flips: a.flips,
        seed: run.seed,
        target_map: a.target_map,
        smoothing_window: a.smoothing_window,
        ..DetectorTrainConfig::default()
    };
    let out = train_detector(Model::new(spec, run.seed)?, &sp.train, &sp.val, &cfg)?;
    run.write("detector.fnck", &out.best.to_bytes()?)?;
    run.write("loss_curve.csv", out.curves.loss.to_csv().as_bytes())?;
    run.write("iou_curve.csv", out.curves.iou.to_csv().as_bytes())?;
    run.write("map_curve.csv", out.curves.map50.to_csv().as_bytes())?;
    println!(
        "ran {} iterations; best validation mAP@50 {:.4} at iteration {}",
        out.iterations_run, out.best_map50, out.best_iteration
    );
    Ok(())
}

fn pick(sp: DatasetSplit, part: Part) -> Vec<LabeledImage> {
    match part {
        Part::Train => sp.train,
        Part::Val => sp.val,
        Part::Test => sp.test,
        Part::All => [sp.train, sp.val, sp.test].concat(),
    }
}

pub fn evaluate_classifier(run: &mut Run, a: &EvaluateClassifierArgs) -> Result<(), CliError> {
    run.input(&a.model)?;
    let ckpt = Checkpoint::load(&a.model)?;
    let sp = classification_split(run, &a.data, run.seed, &a.split)?;
    if sp.class_names != ckpt.class_names {
        return Err(CliError::Failed(format!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            sp.class_names, ckpt.class_names
        )));
    }
    let samples = pick(sp, a.part);
    let report = classify::evaluate(&ckpt.to_model()?, &ckpt.class_names, &samples)?;
    write_evaluation(run, "", &report)?;
    println!("accuracy {:.4} on {} images", report.accuracy, samples.len());
    print!("{}", report.confusion_csv());
    Ok(())
}

#[derive(serde::Serialize)]
struct DetectorSummary {
    images: usize,
    ground_truths: usize,
    map50: Option<f64>,
    mean_iou: Option<f64>,
    correct_ratio: Option<f64>,
}

pub fn evaluate_detector(run: &mut Run, a: &EvaluateDetectorArgs) -> Result<(), CliError> {
    run.input(&a.model)?;
    let ckpt = Checkpoint::load(&a.model)?;
    let sp = detection_split(run, &a.data)?;
    let samples = pick(sp, a.part);
    let mut detector = Detector::from_checkpoint(&ckpt, a.conf, a.nms)?;
    detector.letterbox = a.letterbox;
    let images: Vec<&fishnet::data::Image> = samples.iter().map(|s| &s.image).collect();
    let dets = detector.detect_many(&images)?;
    let truths: Vec<Vec<fishnet::detect::BoundingBox>> =
        samples.iter().map(|s| s.boxes().unwrap_or_default().to_vec()).collect();
    let scored: Vec<ScoredBox> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |d| ScoredBox { image: i, bbox: d.bbox, score: d.score() }))
        .collect();
    let mut pr = String::from("recall,precision,score_threshold\n");
    for p in pr_curve(&scored, &truths, 0.5) {
        let _ = writeln!(pr, "{},{},{}", p.recall, p.precision, p.score_threshold);
    }
    run.write("pr_curve.csv", pr.as_bytes())?;
    let mut detail = String::from("image_id,x_min,y_min,x_max,y_max,objectness,class_score\n");
    let mut per_image = Vec::new();
    for ((s, ds), gt) in samples.iter().zip(&dets).zip(&truths) {
        let kept: Vec<_> = ds.iter().filter(|d| d.score() >= a.report_conf).collect();
        for d in &kept {
            let b = d.bbox;
            let _ = writeln!(
                detail,
                "{},{},{},{},{},{},{}",
                s.id, b.x_min, b.y_min, b.x_max, b.y_max, d.objectness, d.class_score
            );
        }
        per_image.push(ImageBoxes {
            detections: kept.iter().map(|d| d.bbox).collect(),
            ground_truths: gt.clone(),
        });
    }
    run.write("detections.csv", detail.as_bytes())?;
    let avg = average_iou(&per_image);
    let summary = DetectorSummary {
        images: samples.len(),
        ground_truths: truths.iter().map(Vec::len).sum(),
        map50: average_precision_50(&scored, &truths),
        mean_iou: avg.mean_iou,
        correct_ratio: avg.correct_ratio,
    };
    run.write_json("summary.json", &summary)?;
    let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "mAP@50 {} | average IoU {} | correct ratio {} over {} images",
        show(summary.map50),
        show(summary.mean_iou),
        show(summary.correct_ratio),
        summary.images
    );
    Ok(())
}

pub fn augment(run: &mut Run, a: &AugmentArgs) -> Result<(), CliError> {
    let sp = classification_split(run, &a.data, run.seed, &a.split)?;
    let expanded = expand_dataset(&sp, &augment_config(&a.augmentation), derive_seed(run.seed, 7))?;
    for (name, part) in [("train", &expanded.train), ("val", &expanded.val), ("test", &expanded.test)] {
        let ds = Dataset {
            class_names: expanded.class_names.clone(),
            samples: part.clone(),
        };
        let rel = format!("augmented/{name}");
        save_classification_dataset(&ds, &run.path(&rel), &a.format)?;
        run.record_dir(&rel)?;
    }
    run.write("split.csv", split_csv(&expanded).as_bytes())?;
    println!(
        "train {} -> {}, val {}, test {}",
        sp.train.len(),
        expanded.train.len(),
        expanded.val.len(),
        expanded.test.len()
    );
    Ok(())
}

pub fn run_pipeline(run: &mut Run, a: &RunPipelineArgs) -> Result<(), CliError> {
    run.input(&a.frames)?;
    run.input(&a.detector)?;
    run.input(&a.classifier)?;
    let frames = load_frames(&a.frames)?;
    let cfg = PipelineConfig {
        conf_threshold: a.conf,
        nms_threshold: a.nms,
        crop_margin: a.crop_margin,
        label_names: a.labels.clone(),
    };
    let det = Checkpoint::load(&a.detector)?;
    let cls = Checkpoint::load(&a.classifier)?;
    let mut detector = Detector::from_checkpoint(&det, a.conf, a.nms)?;
    detector.letterbox = a.letterbox;
    let pipeline = Pipeline::new(detector, cls.to_model()?, cls.class_names.clone(), &cfg)?;
    let results = pipeline.run(&frames)?;
    run.write("counts.csv", counts_csv(&results, pipeline.class_names()).as_bytes())?;
    run.write("detections.csv", detections_csv(&results).as_bytes())?;
    let total: usize = results.iter().map(|r| r.detections.len()).sum();
    println!("{} frames, {total} fish", results.len());
    for n in pipeline.class_names() {
        let c: usize = results.iter().map(|r| r.species_counts.get(n).copied().unwrap_or(0)).sum();
        println!("  {n}: {c}");
    }
    Ok(())
}

pub fn gen_synthetic(run: &mut Run, a: &GenSyntheticArgs) -> Result<(), CliError> {
    match a.kind {
        SynthKind::Classification => {
            let cfg = ClassificationSynth {
                classes: a.classes.unwrap_or(4),
                per_class: a.per_class,
                image_size: a.image_size.unwrap_or(200),
            };
            let ds = generate_classification(&cfg, run.seed)?;
            save_classification_dataset(&ds, &run.path("dataset"), &a.format)?;
            run.record_dir("dataset")?;
            println!("{} images in {} classes", ds.len(), ds.class_names.len());
        }
        SynthKind::Detection => {
            let cfg = DetectionSynth {
                image_size: a.image_size.unwrap_or(128),
                min_fish: a.min_fish,
                max_fish: a.max_fish,
                species: a.classes.unwrap_or(1),
                ..DetectionSynth::new(a.images)
            };
            let syn = generate_detection(&cfg, run.seed)?;
            save_detection_dataset(&syn.dataset, &run.path("dataset"), &a.format)?;
            run.record_dir("dataset")?;
            let names = &syn.dataset.class_names;
            let mut gt = String::from("frame_id,n_fish");
            for n in names {
                let _ = write!(gt, ",{n}");
            }
            gt.push('\n');
            for (s, kinds) in syn.dataset.samples.iter().zip(&syn.species) {
                let _ = write!(gt, "{},{}", s.id, kinds.len());
                for k in 0..names.len() {
                    let _ = write!(gt, ",{}", kinds.iter().filter(|&&x| x == k).count());
                }
                gt.push('\n');
            }
            run.write("ground_truth.csv", gt.as_bytes())?;
            // Labeled fish crops for training the pipeline's classifier.
            let crops = species_crops(&syn, a.crop_jitter, derive_seed(run.seed, 1))?;
            save_classification_dataset(&crops, &run.path("crops"), &a.format)?;
            run.record_dir("crops")?;
            let fish: usize = syn.species.iter().map(Vec::len).sum();
            println!("{} frames with {fish} fish", syn.dataset.len());
        }
    }
    Ok(())
}

/// Returns whether every op passed.
pub fn gradcheck_cmd(run: &mut Run, a: &GradcheckArgs) -> Result<bool, CliError> {
    let reports = gradcheck::run_suite(run.seed, a.cases)?;
    let mut csv = String::from("op,cases,max_rel_error,passed\n");
    for r in &reports {
        let _ = writeln!(csv, "{},{},{:e},{}", r.op, r.cases, r.max_rel_error, r.passed());
        println!(
            "{:<28} max rel error {:.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    run.write("gradcheck.csv", csv.as_bytes())?;
    Ok(reports.iter().all(|r| r.passed()))
}
