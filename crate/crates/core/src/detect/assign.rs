//! Ground-truth to anchor/cell assignment.

use super::boxes::{shape_iou, Anchor, BoundingBox};
use super::decode::{encode_box, BoxLogits, HeadGeometry};
use crate::error::{contract, Result};

/// Non-best anchors whose shape IoU with a ground truth exceeds this are
/// left out of the objectness loss at the ground truth's cell.
pub const IGNORE_IOU: f64 = 0.5;

/// Regression target for one assigned anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    /// Center offset within the cell, in (0, 1).
    pub offset_x: f64,
    pub offset_y: f64,
    /// Log size ratio to the anchor.
    pub tw: f64,
    pub th: f64,
    pub class: usize,
    pub truth: BoundingBox,
}

/// Targets for one image on one head. Slots are indexed
/// `anchor * cells + gy * grid_w + gx`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTargets {
    pub geometry: HeadGeometry,
    pub objectness: Vec<f64>,
    pub ignore: Vec<bool>,
    pub boxes: Vec<Option<BoxTarget>>,
}

impl GridTargets {
    pub fn empty(geometry: &HeadGeometry) -> Self {
        let n = geometry.anchors.len() * geometry.cells();
        Self {
            geometry: geometry.clone(),
            objectness: vec![0.0; n],
            ignore: vec![false; n],
            boxes: vec![None; n],
        }
    }

    pub fn slot(&self, anchor: usize, gx: usize, gy: usize) -> usize {
        anchor * self.geometry.cells() + gy * self.geometry.grid_w + gx
    }

    pub fn positives(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_some()).count()
    }
}

/// Anchor with the highest shape IoU against a `w x h` box; first wins ties.
pub fn best_anchor(w: f64, h: f64, anchors: &[Anchor]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in anchors.iter().enumerate() {
        let v = shape_iou(w, h, a.width, a.height);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

fn cell_of(bbox: &BoundingBox, geom: &HeadGeometry) -> (usize, usize) {
    let (cx, cy) = bbox.center();
    let s = geom.stride as f64;
    let gx = ((cx / s).floor().max(0.0) as usize).min(geom.grid_w - 1);
    let gy = ((cy / s).floor().max(0.0) as usize).min(geom.grid_h - 1);
    (gx, gy)
}

/// Assigns each annotation (class 0) to the single anchor, over all heads,
/// whose shape best matches it, at the cell containing its center. Later
/// annotations overwrite earlier ones that land on the same slot.
pub fn assign_targets(annotations: &[BoundingBox], heads: &[HeadGeometry]) -> Result<Vec<GridTargets>> {
    let labeled: Vec<(BoundingBox, usize)> = annotations.iter().map(|b| (*b, 0)).collect();
    assign_labeled_targets(&labeled, heads)
}

pub fn assign_labeled_targets(annotations: &[(BoundingBox, usize)], heads: &[HeadGeometry]) -> Result<Vec<GridTargets>> {
    let first = heads.first().ok_or_else(|| contract("assign_targets", "no detection heads"))?;
    let (img_w, img_h) = (first.image_width(), first.image_height());
    let mut targets: Vec<GridTargets> = heads.iter().map(GridTargets::empty).collect();
    let all: Vec<(usize, usize, Anchor)> = heads
        .iter()
        .enumerate()
        .flat_map(|(h, g)| g.anchors.iter().enumerate().map(move |(a, &anchor)| (h, a, anchor)))
        .collect();
    let tol = 1e-6;
    for (bbox, class) in annotations {
        if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
            return Err(contract("assign_targets", format!("zero-area annotation {bbox:?}")));
        }
        if bbox.x_min < -tol || bbox.y_min < -tol || bbox.x_max > img_w + tol || bbox.y_max > img_h + tol {
            return Err(contract(
                "assign_targets",
                format!("annotation {bbox:?} outside {img_w}x{img_h} image"),
            ));
        }
        let shapes: Vec<Anchor> = all.iter().map(|t| t.2).collect();
        let (best, _) = best_anchor(bbox.width(), bbox.height(), &shapes).expect("at least one anchor");
        for (k, &(h, a, anchor)) in all.iter().enumerate() {
            let geom = &heads[h];
            let (gx, gy) = cell_of(bbox, geom);
            let t = &mut targets[h];
            let slot = t.slot(a, gx, gy);
            if k == best {
                if *class >= geom.classes {
                    return Err(contract("assign_targets", format!("class {class} outside head with {} classes", geom.classes)));
                }
                let (_, BoxLogits { tw, th, .. }) = encode_box(bbox, anchor, geom.stride);
                let (cx, cy) = bbox.center();
                let s = geom.stride as f64;
                t.objectness[slot] = 1.0;
                t.boxes[slot] = Some(BoxTarget {
                    offset_x: (cx / s - gx as f64).clamp(0.0, 1.0),
                    offset_y: (cy / s - gy as f64).clamp(0.0, 1.0),
                    tw,
                    th,
                    class: *class,
                    truth: *bbox,
                });
            } else if shape_iou(bbox.width(), bbox.height(), anchor.width, anchor.height) > IGNORE_IOU {
                t.ignore[slot] = true;
            }
        }
    }
    for t in &mut targets {
        for (ig, obj) in t.ignore.iter_mut().zip(&t.objectness) {
            if *obj > 0.0 {
                *ig = false;
            }
        }
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DEFAULT_ANCHORS;

    fn head(anchors: &[Anchor], stride: usize, grid: usize) -> HeadGeometry {
        HeadGeometry {
            anchors: anchors.to_vec(),
            classes: 1,
            stride,
            grid_w: grid,
            grid_h: grid,
        }
    }

    fn yolo_heads() -> Vec<HeadGeometry> {
        vec![
            head(&DEFAULT_ANCHORS[6..9], 32, 19),
            head(&DEFAULT_ANCHORS[3..6], 16, 38),
            head(&DEFAULT_ANCHORS[0..3], 8, 76),
        ]
    }

    #[test]
    fn exact_anchor_shape_wins() {
        let bbox = BoundingBox::from_center(300.0, 300.0, 116.0, 90.0);
        let t = assign_targets(&[bbox], &yolo_heads()).unwrap();
        assert_eq!(t[0].positives(), 1);
        assert_eq!(t[1].positives() + t[2].positives(), 0);
        let slot = t[0].slot(0, 9, 9);
        assert!(t[0].boxes[slot].is_some());
    }

    #[test]
    fn objectness_target_is_local() {
        let g = head(&[Anchor::new(10.0, 10.0), Anchor::new(40.0, 40.0)], 8, 8);
        // Center (28, 20) falls in cell (3, 2).
        let t = assign_targets(&[BoundingBox::from_center(28.0, 20.0, 9.0, 11.0)], &[g]).unwrap();
        let hot: Vec<usize> = (0..t[0].objectness.len()).filter(|&i| t[0].objectness[i] > 0.0).collect();
        assert_eq!(hot, vec![t[0].slot(0, 3, 2)]);
    }

    #[test]
    fn box_of_20_by_26_prefers_16_by_30() {
        let (i, v) = best_anchor(20.0, 26.0, &DEFAULT_ANCHORS).unwrap();
        assert_eq!(DEFAULT_ANCHORS[i], Anchor::new(16.0, 30.0));
        // 16*26 / (520 + 480 - 416)
        assert!((v - 416.0 / 584.0).abs() < 1e-12);
    }

    #[test]
    fn near_duplicate_anchor_is_ignored() {
        let g = head(&[Anchor::new(20.0, 20.0), Anchor::new(22.0, 22.0)], 8, 4);
        let t = assign_targets(&[BoundingBox::from_center(12.0, 12.0, 20.0, 20.0)], &[g]).unwrap();
        assert!(t[0].ignore[t[0].slot(1, 1, 1)]);
        assert!(!t[0].ignore[t[0].slot(0, 1, 1)]);
    }

    #[test]
    fn degenerate_or_outside_annotations_are_rejected() {
        let g = vec![head(&[Anchor::new(10.0, 10.0)], 8, 4)];
        assert!(assign_targets(&[BoundingBox::new(3.0, 3.0, 3.0, 9.0).unwrap()], &g).is_err());
        assert!(assign_targets(&[BoundingBox::new(20.0, 20.0, 40.0, 30.0).unwrap()], &g).is_err());
    }
}
