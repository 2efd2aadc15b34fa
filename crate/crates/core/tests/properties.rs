use proptest::prelude::*;

use fishnet::augment::{augment_image, AugmentConfig};
use fishnet::data::{split, Dataset, Image, Label, LabeledImage, Provenance, SplitFractions};
use fishnet::detect::{nms, BoundingBox, Detection};
use fishnet::metrics::{average_precision, iou, moving_average, ScoredBox};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn a_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec(
        (a_box(), 0.0..1.0f64).prop_map(|(bbox, s)| Detection {
            bbox,
            objectness: s,
            class_score: 1.0,
        }),
        0..max,
    )
}

fn labeled(n: usize, classes: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| LabeledImage {
            id: format!("s{i:04}"),
            image: Image::filled(1, 1, [i as u8, 0, 0]),
            label: Label::Class(i % classes),
            provenance: Provenance::Unsplit,
        })
        .collect();
    Dataset::new((0..classes).map(|c| format!("k{c}")).collect(), samples).unwrap()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in a_box(), b in a_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_sorted_non_overlapping_subset(dets in detections(12), thr in 0.05..0.95f64) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for w in kept.windows(2) {
            prop_assert!(w[0].score() >= w[1].score());
        }
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) < thr);
            }
        }
        // The best detection always survives.
        if let Some(top) = dets.iter().map(Detection::score).reduce(f64::max) {
            prop_assert_eq!(kept[0].score(), top);
        }
    }

    #[test]
    fn ap_depends_only_on_score_order(
        truth in prop::collection::vec(a_box(), 0..5),
        boxes in prop::collection::vec((a_box(), 0.0..1.0f64), 0..8),
    ) {
        let scored: Vec<ScoredBox> = boxes.iter().map(|&(bbox, score)| ScoredBox { image: 0, bbox, score }).collect();
        // A strictly increasing map of the scores keeps the ranking.
        let squashed: Vec<ScoredBox> = scored.iter().map(|s| ScoredBox { score: s.score.powi(3) * 0.5 + 0.1, ..*s }).collect();
        let truths = vec![truth];
        prop_assert_eq!(average_precision(&scored, &truths, 0.5), average_precision(&squashed, &truths, 0.5));
        if let Some(ap) = average_precision(&scored, &truths, 0.5) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }
    }

    #[test]
    fn split_is_a_deterministic_partition(n in 8usize..80, classes in 2usize..5, seed in any::<u64>()) {
        let ds = labeled(n, classes);
        let a = split(&ds, SplitFractions::CLASSIFICATION, seed, true).unwrap();
        prop_assert_eq!(&a, &split(&ds, SplitFractions::CLASSIFICATION, seed, true).unwrap());
        a.validate().unwrap();
        let mut ids: Vec<&str> = a.train.iter().chain(&a.val).chain(&a.test).map(|s| s.id.as_str()).collect();
        ids.sort();
        let expected: Vec<String> = (0..n).map(|i| format!("s{i:04}")).collect();
        prop_assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn moving_average_of_a_constant_is_constant(v in -5.0..5.0f64, n in 1usize..40, w in 1usize..10) {
        for m in moving_average(&vec![v; n], w) {
            prop_assert!((m - v).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_keeps_image_size(w in 2usize..20, h in 2usize..20, seed in any::<u64>()) {
        let img = Image::filled(w, h, [10, 20, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment_image(&img, &AugmentConfig::default(), &mut rng);
        prop_assert_eq!((out.width, out.height), (w, h));
        // A constant image stays constant under any resampling with edge replication.
        prop_assert!(out.data.chunks(3).all(|p| p == [10, 20, 30]));
    }
}
