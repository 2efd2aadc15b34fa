//! Greedy non-maximum suppression.

use super::boxes::Detection;
use crate::metrics::iou;

/// Keeps detections in descending score order, dropping any whose IoU with
/// an already kept detection reaches `iou_threshold`. Boxes that do not
/// overlap never suppress each other, even at threshold 0. Equal scores keep
/// their input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score().total_cmp(&detections[a].score()));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        let suppressed = kept.iter().any(|k| {
            let v = iou(&k.bbox, &d.bbox);
            v > 0.0 && v >= iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::BoundingBox;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(x0, y0, x1, y1).unwrap(),
            objectness: score,
            class_score: 1.0,
        }
    }

    #[test]
    fn duplicate_keeps_higher_score() {
        let out = nms(&[det(0.0, 0.0, 4.0, 4.0, 0.8), det(0.0, 0.0, 4.0, 4.0, 0.9)], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].objectness, 0.9);
    }

    #[test]
    fn disjoint_boxes_survive_any_threshold() {
        let dets = [det(0.0, 0.0, 1.0, 1.0, 0.3), det(5.0, 5.0, 6.0, 6.0, 0.7)];
        for thr in [0.0, 0.5, 1.0] {
            assert_eq!(nms(&dets, thr).len(), 2);
        }
    }

    #[test]
    fn chain_suppression_is_greedy() {
        // b overlaps a and c; a suppresses b, so c survives.
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(4.0, 0.0, 14.0, 10.0, 0.8);
        let c = det(8.0, 0.0, 18.0, 10.0, 0.7);
        let out = nms(&[c, b, a], 0.3);
        assert_eq!(out, vec![a, c]);
    }
}
