//! Detection and curve metrics: IoU, matched-IoU summaries, AP@50, and
//! trailing moving averages.

use serde::{Deserialize, Serialize};

use crate::detect::BoundingBox;

/// Intersection over union. Zero for disjoint boxes and when the union is
/// empty (both boxes degenerate).
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Detections and ground truths of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageBoxes {
    pub detections: Vec<BoundingBox>,
    pub ground_truths: Vec<BoundingBox>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AverageIou {
    /// Mean IoU over matched pairs; `None` when nothing matched.
    pub mean_iou: Option<f64>,
    /// Fraction of detections whose best ground-truth IoU is at least 0.5;
    /// `None` without detections.
    pub correct_ratio: Option<f64>,
    /// IoU of every matched pair, in matching order.
    pub matched: Vec<f64>,
}

/// Greedy one-to-one matching by descending IoU within each image.
pub fn average_iou(images: &[ImageBoxes]) -> AverageIou {
    let mut matched = Vec::new();
    let mut detections = 0usize;
    let mut correct = 0usize;
    for img in images {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (d, db) in img.detections.iter().enumerate() {
            let mut best = 0.0f64;
            for (g, gb) in img.ground_truths.iter().enumerate() {
                let v = iou(db, gb);
                best = best.max(v);
                if v > 0.0 {
                    pairs.push((v, d, g));
                }
            }
            detections += 1;
            if best >= 0.5 {
                correct += 1;
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_d = vec![false; img.detections.len()];
        let mut used_g = vec![false; img.ground_truths.len()];
        for (v, d, g) in pairs {
            if !used_d[d] && !used_g[g] {
                used_d[d] = true;
                used_g[g] = true;
                matched.push(v);
            }
        }
    }
    AverageIou {
        mean_iou: (!matched.is_empty()).then(|| matched.iter().sum::<f64>() / matched.len() as f64),
        correct_ratio: (detections > 0).then(|| correct as f64 / detections as f64),
        matched,
    }
}

/// A scored detection tagged with the image it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
    pub score_threshold: f64,
}

/// Precision/recall after each detection in descending-score order. A
/// detection is a true positive when its best IoU among the still-unmatched
/// ground truths of its image reaches `iou_threshold`; that ground truth is
/// then consumed. Ties in score keep input order.
pub fn pr_curve(detections: &[ScoredBox], ground_truths: &[Vec<BoundingBox>], iou_threshold: f64) -> Vec<PRPoint> {
    let total_gt: usize = ground_truths.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut used: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for idx in order {
        let det = &detections[idx];
        let gts = ground_truths.get(det.image).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gts.iter().enumerate() {
            if used[det.image][g] {
                continue;
            }
            let v = iou(&det.bbox, gb);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= iou_threshold => {
                used[det.image][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push(PRPoint {
            recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
            precision: tp as f64 / (tp + fp) as f64,
            score_threshold: det.score,
        });
    }
    curve
}

/// All-point interpolated average precision. `None` when there are neither
/// ground truths nor detections; zero when only detections exist.
pub fn average_precision(detections: &[ScoredBox], ground_truths: &[Vec<BoundingBox>], iou_threshold: f64) -> Option<f64> {
    let total_gt: usize = ground_truths.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return (!detections.is_empty()).then_some(0.0);
    }
    let curve = pr_curve(detections, ground_truths, iou_threshold);
    // Precision envelope, swept from the end.
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Some(ap)
}

/// AP at IoU 0.5. With a single class this is also mAP@50.
pub fn average_precision_50(detections: &[ScoredBox], ground_truths: &[Vec<BoundingBox>]) -> Option<f64> {
    average_precision(detections, ground_truths, 0.5)
}

/// Trailing mean over the last `min(window, i + 1)` values.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (i, &v) in series.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= series[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_hand_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn average_iou_of_perfect_detections() {
        let boxes = vec![b(0.0, 0.0, 2.0, 2.0), b(4.0, 4.0, 9.0, 6.0)];
        let r = average_iou(&[ImageBoxes {
            detections: boxes.clone(),
            ground_truths: boxes,
        }]);
        assert_eq!(r.mean_iou, Some(1.0));
        assert_eq!(r.correct_ratio, Some(1.0));
    }

    #[test]
    fn false_positives_halve_the_correct_ratio() {
        let gt = vec![b(0.0, 0.0, 2.0, 2.0)];
        let r = average_iou(&[ImageBoxes {
            detections: vec![gt[0], b(10.0, 10.0, 12.0, 12.0)],
            ground_truths: gt,
        }]);
        assert_eq!(r.correct_ratio, Some(0.5));
        assert_eq!(r.mean_iou, Some(1.0));
    }

    #[test]
    fn average_iou_of_three_pairs() {
        let mk = |d: BoundingBox, g: BoundingBox| ImageBoxes {
            detections: vec![d],
            ground_truths: vec![g],
        };
        let r = average_iou(&[
            mk(b(0.0, 0.0, 2.0, 2.0), b(0.0, 0.0, 2.0, 2.0)),
            mk(b(0.0, 0.0, 2.0, 2.0), b(0.0, 0.0, 2.0, 1.0)),
            mk(b(0.0, 0.0, 2.0, 2.0), b(1.0, 1.0, 3.0, 3.0)),
        ]);
        let expected = (1.0 + 0.5 + 1.0 / 7.0) / 3.0;
        assert!((r.mean_iou.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_average_iou_is_undefined() {
        let r = average_iou(&[]);
        assert_eq!(r.mean_iou, None);
        assert_eq!(r.correct_ratio, None);
    }

    #[test]
    fn ap_extremes() {
        let gts = vec![vec![b(0.0, 0.0, 2.0, 2.0), b(5.0, 5.0, 8.0, 8.0)]];
        let perfect: Vec<ScoredBox> = gts[0].iter().map(|&bbox| ScoredBox { image: 0, bbox, score: 1.0 }).collect();
        assert_eq!(average_precision_50(&perfect, &gts), Some(1.0));
        let wrong = vec![ScoredBox {
            image: 0,
            bbox: b(20.0, 20.0, 21.0, 21.0),
            score: 0.9,
        }];
        assert_eq!(average_precision_50(&wrong, &gts), Some(0.0));
        assert_eq!(average_precision_50(&[], &[vec![]]), None);
        assert_eq!(average_precision_50(&wrong, &[vec![]]), Some(0.0));
    }

    #[test]
    fn ap_hand_case() {
        // Ranked: TP, FP, TP over 2 GT -> precisions 1, 1/2, 2/3 at recalls 1/2, 1/2, 1.
        // Envelope: 1, 2/3, 2/3 -> AP = 0.5 * 1 + 0 + 0.5 * 2/3.
        let gts = vec![vec![b(0.0, 0.0, 2.0, 2.0), b(5.0, 5.0, 8.0, 8.0)]];
        let dets = vec![
            ScoredBox { image: 0, bbox: gts[0][0], score: 0.9 },
            ScoredBox { image: 0, bbox: b(30.0, 30.0, 31.0, 31.0), score: 0.8 },
            ScoredBox { image: 0, bbox: gts[0][1], score: 0.7 },
        ];
        let ap = average_precision_50(&dets, &gts).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gts = vec![vec![b(0.0, 0.0, 2.0, 2.0)]];
        let dets = vec![
            ScoredBox { image: 0, bbox: gts[0][0], score: 0.9 },
            ScoredBox { image: 0, bbox: gts[0][0], score: 0.8 },
        ];
        let curve = pr_curve(&dets, &gts, 0.5);
        assert_eq!(curve[1].precision, 0.5);
        assert_eq!(average_precision_50(&dets, &gts), Some(1.0));
    }

    #[test]
    fn moving_average_cases() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&[3.0, 1.0], 1), vec![3.0, 1.0]);
        assert_eq!(moving_average(&[2.0; 5], 3), vec![2.0; 5]);
        assert!(moving_average(&[], 4).is_empty());
    }
}
