use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fishnet::autograd::Tape;
use fishnet::classify::{EvaluationReport, PredictionRecord};
use fishnet::data::synthetic::{generate_detection, DetectionSynth, FISH_SATURATION};
use fishnet::data::{
    load_detection_dataset, save_detection_dataset, split, Checkpoint, Dataset, Image, Label, LabeledImage, Provenance,
    SplitFractions,
};
use fishnet::nn::{build_cnn_senet_with, CnnSenetOptions, Model};
use fishnet::tensor::Tensor;
use fishnet::Error;

fn trained_once() -> Model<f32> {
    let spec = build_cnn_senet_with(&CnnSenetOptions {
        input_size: 72,
        ..CnnSenetOptions::new(3)
    })
    .unwrap();
    let mut model = Model::new(spec, 17).unwrap();
    // One train-mode pass initializes the batch-norm running statistics.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[2, 3, 72, 72], |i| (i % 7) as f32 / 7.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    model.forward_train(&mut tape, x, &mut rng).unwrap();
    model
}

#[test]
fn checkpoint_round_trips_through_a_file() {
    let model = trained_once();
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), serde_json::json!(3));
    let ckpt = Checkpoint::from_model(&model, vec!["a".into(), "b".into(), "c".into()], meta);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fnck");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);

    let input = Tensor::from_fn(&[1, 3, 72, 72], |i| (i % 11) as f32 / 11.0);
    let a = model.predict(input.clone()).unwrap();
    let b = back.to_model().unwrap().predict(input).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn flipped_checkpoint_byte_is_detected() {
    let ckpt = Checkpoint::from_model(&trained_once(), vec!["a".into(), "b".into(), "c".into()], BTreeMap::new());
    let mut bytes = ckpt.to_bytes().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn detection_dataset_round_trips() {
    let syn = generate_detection(&DetectionSynth::new(4), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_detection_dataset(&syn.dataset, dir.path(), "png").unwrap();
    let back = load_detection_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in syn.dataset.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        let (ba, bb) = (a.boxes().unwrap(), b.boxes().unwrap());
        assert_eq!(ba.len(), bb.len());
        for (x, y) in ba.iter().zip(bb) {
            for (u, v) in [(x.x_min, y.x_min), (x.y_min, y.y_min), (x.x_max, y.x_max), (x.y_max, y.y_max)] {
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }
}

/// Annotated boxes are the tight bounds of the saturated pixels around them,
/// found here by scanning pixels rather than trusting the generator.
#[test]
fn synthetic_boxes_match_a_pixel_scan() {
    let syn = generate_detection(&DetectionSynth { species: 3, ..DetectionSynth::new(10) }, 5).unwrap();
    for s in &syn.dataset.samples {
        let img = &s.image;
        let saturated = |x: usize, y: usize| {
            let p = img.pixel(x, y);
            p.iter().max().unwrap() - p.iter().min().unwrap() >= FISH_SATURATION
        };
        for b in s.boxes().unwrap() {
            let x0 = (b.x_min as usize).saturating_sub(1);
            let y0 = (b.y_min as usize).saturating_sub(1);
            let x1 = (b.x_max as usize + 1).min(img.width);
            let y1 = (b.y_max as usize + 1).min(img.height);
            let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
            for y in y0..y1 {
                for x in x0..x1 {
                    if saturated(x, y) {
                        lo_x = lo_x.min(x);
                        lo_y = lo_y.min(y);
                        hi_x = hi_x.max(x + 1);
                        hi_y = hi_y.max(y + 1);
                    }
                }
            }
            assert_eq!(
                [lo_x as f64, lo_y as f64, hi_x as f64, hi_y as f64],
                [b.x_min, b.y_min, b.x_max, b.y_max],
                "{}",
                s.id
            );
        }
    }
}

#[test]
fn confusion_matrix_matches_a_hand_tally() {
    let rec = |id: &str, t, p| PredictionRecord {
        id: id.into(),
        true_class: t,
        predicted_class: p,
        probability: 0.9,
    };
    let preds = vec![rec("a", 0, 0), rec("b", 0, 1), rec("c", 1, 1), rec("d", 2, 2), rec("e", 2, 0), rec("f", 2, 2)];
    let r = EvaluationReport::from_predictions(vec!["x".into(), "y".into(), "z".into()], preds).unwrap();
    // Counted by hand from the list above.
    assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 2]]);
    assert_eq!(r.accuracy, 4.0 / 6.0);
    assert!(EvaluationReport::from_predictions(vec!["x".into()], Vec::new()).is_err());
}

fn dataset(per_class: &[usize]) -> Dataset {
    let mut samples = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        for i in 0..n {
            samples.push(LabeledImage {
                id: format!("c{c}_{i}"),
                image: Image::filled(1, 1, [0, 0, 0]),
                label: Label::Class(c),
                provenance: Provenance::Unsplit,
            });
        }
    }
    Dataset::new((0..per_class.len()).map(|c| format!("k{c}")).collect(), samples).unwrap()
}

#[test]
fn split_sizes_for_full_size_datasets() {
    // 1022 images in four classes: validation and test land within one
    // image per class of 15% of the whole set.
    let sp = split(&dataset(&[317, 255, 250, 200]), SplitFractions::CLASSIFICATION, 1, true).unwrap();
    assert!(sp.val.len().abs_diff(155) <= 4 && sp.test.len().abs_diff(155) <= 4);
    assert_eq!(sp.train.len() + sp.val.len() + sp.test.len(), 1022);
    // floor(0.15 * n) per class: 47 + 38 + 37 + 30.
    assert_eq!(sp.val.len(), 152);

    // 619 detection frames at 70/30: floor(0.3 * 619) = 185 held out.
    let det = split(&dataset(&[619]), SplitFractions::DETECTION, 1, false).unwrap();
    assert_eq!((det.train.len(), det.val.len(), det.test.len()), (434, 185, 0));
}
