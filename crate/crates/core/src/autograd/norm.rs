//! Batch normalization over the channel axis of (N, C) or NCHW inputs.

use super::{ChannelLayout, Mode, Op, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::tensor::{Element, Tensor};

/// Running statistics of one batch-norm layer. Both are `None` until the
/// first training batch has been seen; that batch seeds them directly and
/// later batches blend in with an exponential moving average.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnState<T: Element = f32> {
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
}

impl<T: Element> BnState<T> {
    pub fn is_initialized(&self) -> bool {
        self.running_mean.is_some() && self.running_var.is_some()
    }

    pub fn cast<U: Element>(&self) -> BnState<U> {
        let conv = |v: &Option<Vec<T>>| v.as_ref().map(|v| v.iter().map(|x| U::of(x.as_f64())).collect());
        BnState {
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
        }
    }
}

pub(crate) fn batchnorm_backward<T: Element>(
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    layout: &ChannelLayout,
    g: &[T],
) -> [Vec<T>; 3] {
    let c = layout.c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
        let ch = layout.channel_of(i);
        dgamma[ch] += gi * xh;
        dbeta[ch] += gi;
    }
    let m = T::of((layout.n * layout.spatial) as f64);
    let dx = g
        .iter()
        .zip(xhat)
        .enumerate()
        .map(|(i, (&gi, &xh))| {
            let ch = layout.channel_of(i);
            let scale = gamma[ch] * inv_std[ch];
            if train {
                scale * (gi - dbeta[ch] / m - xh * dgamma[ch] / m)
            } else {
                scale * gi
            }
        })
        .collect();
    [dx, dgamma, dbeta]
}

impl<T: Element> Tape<T> {
    /// Batch normalization. In train mode, normalizes with batch statistics
    /// and folds them into `state` with the given `momentum`; in infer mode,
    /// uses `state`'s running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let layout = ChannelLayout::of(xv, "batchnorm")?;
        let c = layout.c;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: xv.shape().to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let count = layout.n * layout.spatial;
        let eps_t = T::of(eps);
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(contract(
                        "batchnorm",
                        format!("train mode needs at least 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                for (i, &v) in xv.data().iter().enumerate() {
                    mean[layout.channel_of(i)] += v;
                }
                let inv_count = T::one() / T::of(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv_count);
                let mut var = vec![T::zero(); c];
                for (i, &v) in xv.data().iter().enumerate() {
                    let ch = layout.channel_of(i);
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
                var.iter_mut().for_each(|v| *v *= inv_count);
                (mean, var)
            }
            Mode::Infer => match (&state.running_mean, &state.running_var) {
                (Some(m), Some(v)) => (m.clone(), v.clone()),
                _ => {
                    return Err(contract(
                        "batchnorm",
                        "inference requested before running statistics were initialized",
                    ))
                }
            },
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        for (i, &v) in xv.data().iter().enumerate() {
            let ch = layout.channel_of(i);
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(gv[ch] * xh + bv[ch]);
        }
        let shape = xv.shape().to_vec();

        if mode == Mode::Train {
            let mom = T::of(momentum);
            match (&mut state.running_mean, &mut state.running_var) {
                (Some(rm), Some(rv)) => {
                    for ch in 0..c {
                        rm[ch] = mom * rm[ch] + (T::one() - mom) * mean[ch];
                        rv[ch] = mom * rv[ch] + (T::one() - mom) * var[ch];
                    }
                }
                _ => {
                    state.running_mean = Some(mean);
                    state.running_var = Some(var);
                }
            }
        }

        self.push(
            "batchnorm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
                layout,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, gamma: Vec<f64>, beta: Vec<f64>, state: &mut BnState<f64>, mode: Mode) -> Result<Vec<f64>> {
        let c = gamma.len();
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let g = tape.constant(Tensor::new(vec![c], gamma).unwrap());
        let b = tape.constant(Tensor::new(vec![c], beta).unwrap());
        let y = tape.batchnorm(x, g, b, state, mode, 0.99, 1e-5)?;
        Ok(tape.value(y).data().to_vec())
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 7919) % 13) as f64 * 0.37 - 1.0);
        let mut st = BnState::default();
        let y = run(x, vec![1.0, 1.0], vec![0.0, 0.0], &mut st, Mode::Train).unwrap();
        let layout = ChannelLayout { n: 3, c: 2, spatial: 4 };
        for ch in 0..2 {
            let vals: Vec<f64> = y.iter().enumerate().filter(|(i, _)| layout.channel_of(*i) == ch).map(|(_, v)| *v).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert!(st.is_initialized());
    }

    #[test]
    fn zero_variance_channel_maps_to_zero() {
        let x = Tensor::full(&[4, 1], 3.25);
        let mut st = BnState::default();
        let y = run(x, vec![1.0], vec![0.0], &mut st, Mode::Train).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_affine_normalization() {
        // Values 1..4: mean 2.5, biased variance 1.25.
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut st = BnState::default();
        let y = run(x, vec![2.0], vec![1.0], &mut st, Mode::Train).unwrap();
        let std = (1.25f64 + 1e-5).sqrt();
        for (v, xi) in y.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((v - (2.0 * (xi - 2.5) / std + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_requires_running_statistics() {
        let x = Tensor::full(&[2, 1], 1.0);
        let mut st = BnState::default();
        assert!(run(x, vec![1.0], vec![0.0], &mut st, Mode::Infer).is_err());
    }

    #[test]
    fn train_needs_two_values_per_channel() {
        let x = Tensor::full(&[1, 3], 1.0);
        let mut st = BnState::default();
        assert!(run(x, vec![1.0; 3], vec![0.0; 3], &mut st, Mode::Train).is_err());
    }

    #[test]
    fn running_statistics_follow_moving_average() {
        let mut st = BnState::default();
        let a = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        run(a, vec![1.0], vec![0.0], &mut st, Mode::Train).unwrap();
        assert_eq!(st.running_mean.as_deref(), Some(&[1.0][..]));
        let b = Tensor::new(vec![2, 1], vec![5.0, 5.0]).unwrap();
        run(b, vec![1.0], vec![0.0], &mut st, Mode::Train).unwrap();
        let rm = st.running_mean.as_ref().unwrap()[0];
        assert!((rm - (0.99 * 1.0 + 0.01 * 5.0)).abs() < 1e-12);
        let rv = st.running_var.as_ref().unwrap()[0];
        assert!((rv - 0.99).abs() < 1e-12);
    }
}
