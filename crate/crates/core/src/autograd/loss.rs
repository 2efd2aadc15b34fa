//! Scalar losses. Each computes its local gradient eagerly.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

impl<T: Element> Tape<T> {
    fn check_target(&self, op: &'static str, pred: Var, target: &Tensor<T>) -> Result<()> {
        if self.shape(pred) != target.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(pred).to_vec(),
                right: target.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Mean over rows of `-sum_c t_c ln p_c`, with optional per-class weights
    /// applied to each row by its target distribution.
    pub fn categorical_cross_entropy(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        self.check_target("categorical_cross_entropy", pred, target)?;
        let cols = *target.shape().last().expect("shape");
        if let Some(w) = class_weights {
            if w.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "categorical_cross_entropy",
                    left: target.shape().to_vec(),
                    right: vec![w.len()],
                });
            }
        }
        let rows = target.numel() / cols;
        let inv_rows = T::one() / T::of(rows as f64);
        let (lo, hi) = (T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
        let p = self.value(pred).data();
        let mut total = T::zero();
        let mut grad = vec![T::zero(); p.len()];
        for r in 0..rows {
            let pr = &p[r * cols..(r + 1) * cols];
            let tr = &target.data()[r * cols..(r + 1) * cols];
            let weight = class_weights
                .map(|w| tr.iter().zip(w).map(|(&t, &wi)| t * wi).sum())
                .unwrap_or_else(T::one);
            for c in 0..cols {
                if tr[c] == T::zero() {
                    continue;
                }
                let clamped = pr[c].max(lo).min(hi);
                total -= weight * tr[c] * clamped.ln();
                if pr[c] > lo && pr[c] < hi {
                    grad[r * cols + c] = -weight * tr[c] / clamped * inv_rows;
                }
            }
        }
        self.scalar_with_grad("categorical_cross_entropy", pred, total * inv_rows, grad)
    }

    /// Mean over elements of `-(t ln p + (1 - t) ln(1 - p))`.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("binary_cross_entropy", pred, target)?;
        let inv_n = T::one() / T::of(target.numel() as f64);
        let (lo, hi) = (T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(target.numel());
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let q = p.max(lo).min(hi);
            total -= t * q.ln() + (T::one() - t) * (T::one() - q).ln();
            let inside = p > lo && p < hi;
            grad.push(if inside {
                (-t / q + (T::one() - t) / (T::one() - q)) * inv_n
            } else {
                T::zero()
            });
        }
        self.scalar_with_grad("binary_cross_entropy", pred, total * inv_n, grad)
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("mse", pred, target)?;
        let inv_n = T::one() / T::of(target.numel() as f64);
        let two = T::of(2.0);
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(target.numel());
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = p - t;
            total += d * d;
            grad.push(two * d * inv_n);
        }
        self.scalar_with_grad("mse", pred, total * inv_n, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn cce_of_matching_one_hot_is_zero() {
        let mut tape = Tape::<f64>::new();
        let target = t(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let p = tape.constant(target.clone());
        let l = tape.categorical_cross_entropy(p, &target, None).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-5);
    }

    #[test]
    fn cce_of_uniform_is_ln4() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t(&[1, 4], vec![0.25; 4]));
        let l = tape
            .categorical_cross_entropy(p, &t(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]), None)
            .unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_clamps_zero_probability() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t(&[1, 2], vec![1.0, 0.0]));
        let l = tape
            .categorical_cross_entropy(p, &t(&[1, 2], vec![0.0, 1.0]), None)
            .unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v + PROB_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn mse_of_identical_is_zero_and_bce_is_non_negative() {
        let mut tape = Tape::<f64>::new();
        let v = t(&[3], vec![0.2, 0.5, 0.9]);
        let p = tape.constant(v.clone());
        let l = tape.mse(p, &v).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.0));
        let b = tape.binary_cross_entropy(p, &t(&[3], vec![1.0, 0.0, 1.0])).unwrap();
        assert!(tape.value(b).item().unwrap() > 0.0);
    }

    #[test]
    fn loss_shape_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t(&[1, 3], vec![0.3; 3]));
        assert!(tape.mse(p, &t(&[3], vec![0.0; 3])).is_err());
    }
}
