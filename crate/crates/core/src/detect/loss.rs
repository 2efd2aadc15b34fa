//! Fused detection loss with analytic gradients.
//!
//! Per anchor slot: logistic cross-entropy on objectness (target 1 at
//! assigned slots, 0 elsewhere, skipped in the ignore band); squared error on
//! `sigmoid(tx), sigmoid(ty), tw, th` at assigned slots; logistic
//! cross-entropy on class logits at assigned slots. Summed over slots and
//! averaged over images.

use serde::{Deserialize, Serialize};

use super::assign::GridTargets;
use super::decode::{decode_box, BoxLogits};
use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{contract, Result};
use crate::metrics::iou;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub objectness: f64,
    pub box_offsets: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            objectness: 1.0,
            box_offsets: 1.0,
            class: 1.0,
        }
    }
}

/// Loss components (already weighted) and training IoU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub objectness: f64,
    pub box_offsets: f64,
    pub class: f64,
    /// Summed IoU between decoded predictions and their assigned truths.
    pub iou_sum: f64,
    pub positives: usize,
}

impl LossReport {
    pub fn mean_iou(&self) -> Option<f64> {
        (self.positives > 0).then(|| self.iou_sum / self.positives as f64)
    }

    pub(crate) fn add_scaled(&mut self, other: &LossReport, scale: f64) {
        self.total += scale * other.total;
        self.objectness += scale * other.objectness;
        self.box_offsets += scale * other.box_offsets;
        self.class += scale * other.class;
        self.iou_sum += other.iou_sum;
        self.positives += other.positives;
    }
}

/// `-t ln sigmoid(z) - (1 - t) ln(1 - sigmoid(z))`, computed without
/// overflow, and its derivative `sigmoid(z) - t`.
fn logistic_bce(z: f64, t: f64) -> (f64, f64) {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    (softplus - t * z, sigmoid(z) - t)
}

/// Loss of one image on one head. `raw` is the image's `[A*(5+C), H, W]`
/// grid; the gradient has the same layout.
pub fn head_loss(raw: &[f64], targets: &GridTargets, weights: &LossWeights) -> Result<(LossReport, Vec<f64>)> {
    let g = &targets.geometry;
    if raw.len() != g.channels() * g.cells() {
        return Err(contract(
            "detection_loss",
            format!("grid has {} values, targets expect {}", raw.len(), g.channels() * g.cells()),
        ));
    }
    let mut grad = vec![0.0; raw.len()];
    let mut rep = LossReport::default();
    for (a, &anchor) in g.anchors.iter().enumerate() {
        for gy in 0..g.grid_h {
            for gx in 0..g.grid_w {
                let slot = targets.slot(a, gx, gy);
                let at = |f| g.index(a, f, gy, gx);
                match &targets.boxes[slot] {
                    Some(bt) => {
                        let (l, d) = logistic_bce(raw[at(4)], 1.0);
                        rep.objectness += weights.objectness * l;
                        grad[at(4)] = weights.objectness * d;

                        let (sx, sy) = (sigmoid(raw[at(0)]), sigmoid(raw[at(1)]));
                        let (ex, ey) = (sx - bt.offset_x, sy - bt.offset_y);
                        let (ew, eh) = (raw[at(2)] - bt.tw, raw[at(3)] - bt.th);
                        rep.box_offsets += weights.box_offsets * (ex * ex + ey * ey + ew * ew + eh * eh);
                        grad[at(0)] = weights.box_offsets * 2.0 * ex * sx * (1.0 - sx);
                        grad[at(1)] = weights.box_offsets * 2.0 * ey * sy * (1.0 - sy);
                        grad[at(2)] = weights.box_offsets * 2.0 * ew;
                        grad[at(3)] = weights.box_offsets * 2.0 * eh;

                        for k in 0..g.classes {
                            let t = if k == bt.class { 1.0 } else { 0.0 };
                            let (l, d) = logistic_bce(raw[at(5 + k)], t);
                            rep.class += weights.class * l;
                            grad[at(5 + k)] = weights.class * d;
                        }

                        let logits = BoxLogits {
                            tx: raw[at(0)],
                            ty: raw[at(1)],
                            tw: raw[at(2)],
                            th: raw[at(3)],
                        };
                        rep.iou_sum += iou(&decode_box(logits, anchor, g.stride, gx, gy), &bt.truth);
                        rep.positives += 1;
                    }
                    None if !targets.ignore[slot] => {
                        let (l, d) = logistic_bce(raw[at(4)], targets.objectness[slot]);
                        rep.objectness += weights.objectness * l;
                        grad[at(4)] = weights.objectness * d;
                    }
                    None => {}
                }
            }
        }
    }
    rep.total = rep.objectness + rep.box_offsets + rep.class;
    Ok((rep, grad))
}

/// Records the batch-mean detection loss over all heads on `tape`.
/// `targets[i][h]` holds image `i`'s targets for head `h`.
pub fn detection_loss<T: Element>(
    tape: &mut Tape<T>,
    heads: &[Var],
    targets: &[Vec<GridTargets>],
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    for (h, &head) in heads.iter().enumerate() {
        let [n, c, hh, ww] = tape.value(head).dims4("detection_loss")?;
        if n != targets.len() {
            return Err(contract(
                "detection_loss",
                format!("batch of {n} images, {} target sets", targets.len()),
            ));
        }
        let per = c * hh * ww;
        let inv_n = 1.0 / n as f64;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(n * per);
        for (i, image_targets) in targets.iter().enumerate() {
            let t = image_targets
                .get(h)
                .ok_or_else(|| contract("detection_loss", format!("missing targets for head {h}")))?;
            let raw: Vec<f64> = tape.value(head).data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect();
            let (rep, g) = head_loss(&raw, t, weights)?;
            value += rep.total * inv_n;
            report.add_scaled(&rep, inv_n);
            grad.extend(g.into_iter().map(|v| T::of(v * inv_n)));
        }
        let term = tape.scalar_with_grad("detection_loss", head, T::of(value), grad)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| contract("detection_loss", "no detection heads"))?;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::assign::assign_targets;
    use crate::detect::decode::{encode_box, HeadGeometry};
    use crate::detect::{Anchor, BoundingBox};

    fn geom(grid: usize) -> HeadGeometry {
        HeadGeometry {
            anchors: vec![Anchor::new(8.0, 8.0)],
            classes: 1,
            stride: 8,
            grid_w: grid,
            grid_h: grid,
        }
    }

    #[test]
    fn exact_logits_give_near_zero_loss() {
        let g = geom(2);
        let truth = BoundingBox::new(2.0, 3.0, 11.0, 9.0).unwrap();
        let t = assign_targets(&[truth], std::slice::from_ref(&g)).unwrap();
        let mut raw = vec![0.0; g.channels() * g.cells()];
        for gy in 0..2 {
            for gx in 0..2 {
                raw[g.index(0, 4, gy, gx)] = -20.0;
                raw[g.index(0, 5, gy, gx)] = -20.0;
            }
        }
        let ((gx, gy), l) = encode_box(&truth, g.anchors[0], g.stride);
        for (f, v) in [(0, l.tx), (1, l.ty), (2, l.tw), (3, l.th), (4, 20.0), (5, 20.0)] {
            raw[g.index(0, f, gy, gx)] = v;
        }
        let (rep, _) = head_loss(&raw, &t[0], &LossWeights::default()).unwrap();
        assert!(rep.total <= 1e-4, "{rep:?}");
        assert!((rep.mean_iou().unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_frame_with_confident_negatives_is_free() {
        let g = geom(3);
        let t = assign_targets(&[], std::slice::from_ref(&g)).unwrap();
        let mut raw = vec![0.3; g.channels() * g.cells()];
        for gy in 0..3 {
            for gx in 0..3 {
                raw[g.index(0, 4, gy, gx)] = -100.0;
            }
        }
        let (rep, grad) = head_loss(&raw, &t[0], &LossWeights::default()).unwrap();
        assert!(rep.total < 1e-30);
        assert!(grad.iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn single_cell_hand_sum() {
        // 1x1 grid, stride 8, anchor 8x8, truth centered at (4, 4) of size 8x8:
        // offsets 0.5, tw = th = 0. All logits zero.
        let g = geom(1);
        let t = assign_targets(&[BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap()], std::slice::from_ref(&g)).unwrap();
        let raw = vec![0.0, 0.0, 0.5, -0.25, 0.0, 1.0];
        let w = LossWeights {
            objectness: 2.0,
            box_offsets: 3.0,
            class: 0.5,
        };
        let (rep, grad) = head_loss(&raw, &t[0], &w).unwrap();
        let ln2 = 2f64.ln();
        let obj = 2.0 * ln2;
        let boxes = 3.0 * (0.25 + 0.0625);
        let class = 0.5 * (1.0 + (-1f64).exp()).ln();
        assert!((rep.objectness - obj).abs() < 1e-12);
        assert!((rep.box_offsets - boxes).abs() < 1e-12);
        assert!((rep.class - class).abs() < 1e-12);
        assert!((rep.total - (obj + boxes + class)).abs() < 1e-12);
        assert!((grad[2] - 3.0).abs() < 1e-12);
        assert!((grad[4] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = HeadGeometry {
            anchors: vec![Anchor::new(6.0, 10.0), Anchor::new(14.0, 8.0)],
            classes: 2,
            stride: 4,
            grid_w: 3,
            grid_h: 2,
        };
        let truths = [
            (BoundingBox::new(1.0, 1.0, 8.0, 7.0).unwrap(), 1),
            (BoundingBox::new(5.0, 0.5, 11.5, 7.5).unwrap(), 0),
        ];
        let t = crate::detect::assign::assign_labeled_targets(&truths, std::slice::from_ref(&g)).unwrap();
        let raw: Vec<f64> = (0..g.channels() * g.cells()).map(|i| ((i * 7919) % 17) as f64 / 8.0 - 1.0).collect();
        let w = LossWeights::default();
        let (_, grad) = head_loss(&raw, &t[0], &w).unwrap();
        let h = 1e-6;
        for i in 0..raw.len() {
            let mut p = raw.clone();
            p[i] += h;
            let mut m = raw.clone();
            m[i] -= h;
            let fd = (head_loss(&p, &t[0], &w).unwrap().0.total - head_loss(&m, &t[0], &w).unwrap().0.total) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "index {i}: {fd} vs {}", grad[i]);
        }
    }
}
