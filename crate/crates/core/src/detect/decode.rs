//! Grid decoding and its inverse.

use super::boxes::{Anchor, BoundingBox, Detection};
use crate::autograd::sigmoid;
use crate::error::{contract, Result};
use crate::tensor::{Element, Tensor};

/// Geometry of one detection head: its anchors, class count, stride, and grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGeometry {
    pub anchors: Vec<Anchor>,
    pub classes: usize,
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl HeadGeometry {
    /// Values per anchor: tx, ty, tw, th, objectness, then class logits.
    pub fn fields(&self) -> usize {
        5 + self.classes
    }

    pub fn channels(&self) -> usize {
        self.anchors.len() * self.fields()
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Flat index into a single image's `[A * (5 + C), H, W]` grid.
    pub fn index(&self, anchor: usize, field: usize, gy: usize, gx: usize) -> usize {
        ((anchor * self.fields() + field) * self.grid_h + gy) * self.grid_w + gx
    }

    pub fn image_width(&self) -> f64 {
        (self.grid_w * self.stride) as f64
    }

    pub fn image_height(&self) -> f64 {
        (self.grid_h * self.stride) as f64
    }
}

/// Raw head outputs for one anchor at one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLogits {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// Box in pixels from raw logits at cell `(gx, gy)`.
pub fn decode_box(t: BoxLogits, anchor: Anchor, stride: usize, gx: usize, gy: usize) -> BoundingBox {
    let s = stride as f64;
    let cx = (sigmoid(t.tx) + gx as f64) * s;
    let cy = (sigmoid(t.ty) + gy as f64) * s;
    BoundingBox::from_center(cx, cy, anchor.width * t.tw.exp(), anchor.height * t.th.exp())
}

/// Inverse of [`decode_box`] for the cell containing the box center. Center
/// offsets are clamped into `(0, 1)` so the logits stay finite. Returns the
/// cell and the logits.
pub fn encode_box(bbox: &BoundingBox, anchor: Anchor, stride: usize) -> ((usize, usize), BoxLogits) {
    let s = stride as f64;
    let (cx, cy) = bbox.center();
    let gx = (cx / s).floor().max(0.0) as usize;
    let gy = (cy / s).floor().max(0.0) as usize;
    let logit = |v: f64| {
        let v = v.clamp(1e-9, 1.0 - 1e-9);
        (v / (1.0 - v)).ln()
    };
    let t = BoxLogits {
        tx: logit(cx / s - gx as f64),
        ty: logit(cy / s - gy as f64),
        tw: (bbox.width() / anchor.width).ln(),
        th: (bbox.height() / anchor.height).ln(),
    };
    ((gx, gy), t)
}

fn geometry_of<T: Element>(raw: &Tensor<T>, anchors: &[Anchor], stride: usize) -> Result<(HeadGeometry, usize)> {
    let (n, c, h, w) = match raw.shape() {
        &[c, h, w] => (1, c, h, w),
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(contract("decode_predictions", format!("expected CHW or NCHW grid, got {s:?}"))),
    };
    if anchors.is_empty() || c % anchors.len() != 0 || c / anchors.len() < 6 {
        return Err(contract(
            "decode_predictions",
            format!("grid has {c} channels, not a multiple of (5 + C) for {} anchors", anchors.len()),
        ));
    }
    let geom = HeadGeometry {
        anchors: anchors.to_vec(),
        classes: c / anchors.len() - 5,
        stride,
        grid_w: w,
        grid_h: h,
    };
    Ok((geom, n))
}

/// Decodes one image's raw grid (`[A*(5+C), H, W]`, or NCHW with N = 1)
/// into detections whose score reaches `conf_threshold`, clamped to the
/// grid's image extent. The class score is that of the best class.
pub fn decode_predictions<T: Element>(
    raw_grid: &Tensor<T>,
    anchors: &[Anchor],
    grid_stride: usize,
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let (geom, n) = geometry_of(raw_grid, anchors, grid_stride)?;
    if n != 1 {
        return Err(contract("decode_predictions", format!("expected one image, got {n}")));
    }
    Ok(decode_grid(raw_grid.data(), &geom, conf_threshold))
}

pub(crate) fn decode_grid<T: Element>(raw: &[T], geom: &HeadGeometry, conf_threshold: f64) -> Vec<Detection> {
    let v = |a, f, gy, gx| raw[geom.index(a, f, gy, gx)].as_f64();
    let mut out = Vec::new();
    for (a, &anchor) in geom.anchors.iter().enumerate() {
        for gy in 0..geom.grid_h {
            for gx in 0..geom.grid_w {
                let objectness = sigmoid(v(a, 4, gy, gx));
                let class_score = (0..geom.classes)
                    .map(|k| sigmoid(v(a, 5 + k, gy, gx)))
                    .fold(0.0, f64::max);
                if objectness * class_score < conf_threshold {
                    continue;
                }
                let t = BoxLogits {
                    tx: v(a, 0, gy, gx),
                    ty: v(a, 1, gy, gx),
                    tw: v(a, 2, gy, gx),
                    th: v(a, 3, gy, gx),
                };
                let bbox = decode_box(t, anchor, geom.stride, gx, gy).clamp(geom.image_width(), geom.image_height());
                out.push(Detection {
                    bbox,
                    objectness,
                    class_score,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_decode_to_anchor_at_cell_center() {
        let anchor = Anchor::new(116.0, 90.0);
        let b = decode_box(BoxLogits { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 }, anchor, 32, 0, 0);
        assert_eq!(b.center(), (16.0, 16.0));
        assert!((b.width() - 116.0).abs() < 1e-12 && (b.height() - 90.0).abs() < 1e-12);
    }

    fn grid_with(cells: &[(usize, usize, [f64; 6])]) -> Tensor<f64> {
        // One anchor, one class, 4x4 grid, everything suppressed by default.
        let mut t = Tensor::<f64>::zeros(&[6, 4, 4]);
        for f in 4..6 {
            for i in 0..16 {
                t.data_mut()[f * 16 + i] = -100.0;
            }
        }
        for &(gx, gy, vals) in cells {
            for (f, v) in vals.iter().enumerate() {
                t.data_mut()[f * 16 + gy * 4 + gx] = *v;
            }
        }
        t
    }

    #[test]
    fn suppressed_objectness_yields_nothing() {
        let dets = decode_predictions(&grid_with(&[]), &[Anchor::new(10.0, 10.0)], 8, 1e-6).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn two_active_cells_hand_decoded() {
        let ln2 = 2f64.ln();
        let g = grid_with(&[(1, 2, [0.0, 0.0, ln2, 0.0, 10.0, 10.0]), (3, 0, [0.0, 0.0, 0.0, -ln2, 10.0, 10.0])]);
        let dets = decode_predictions(&g, &[Anchor::new(6.0, 4.0)], 8, 0.5).unwrap();
        assert_eq!(dets.len(), 2);
        // Row-major scan: cell (3,0) first. Center (28, 4), size 6x2.
        let b = dets[0].bbox;
        let want = [25.0, 3.0, 31.0, 5.0];
        for (got, w) in [b.x_min, b.y_min, b.x_max, b.y_max].iter().zip(want) {
            assert!((got - w).abs() < 1e-9);
        }
        // Cell (1,2): center (12, 20), size 12x4.
        let b = dets[1].bbox;
        let want = [6.0, 18.0, 18.0, 22.0];
        for (got, w) in [b.x_min, b.y_min, b.x_max, b.y_max].iter().zip(want) {
            assert!((got - w).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let two = [Anchor::new(1.0, 1.0), Anchor::new(2.0, 2.0)];
        assert!(decode_predictions(&Tensor::<f32>::zeros(&[7, 2, 2]), &two, 8, 0.5).is_err());
        assert!(decode_predictions(&Tensor::<f32>::zeros(&[5, 2, 2]), &two[..1], 8, 0.5).is_err());
        assert!(decode_predictions(&Tensor::<f32>::zeros(&[12, 2, 2]), &two, 8, 0.5).is_ok());
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = Anchor::new(30.0, 61.0);
        let bbox = BoundingBox::new(37.2, 11.9, 81.0, 70.4).unwrap();
        let ((gx, gy), t) = encode_box(&bbox, anchor, 16);
        let back = decode_box(t, anchor, 16, gx, gy);
        for (a, b) in [
            (back.x_min, bbox.x_min),
            (back.y_min, bbox.y_min),
            (back.x_max, bbox.x_max),
            (back.y_max, bbox.y_max),
        ] {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }
}
