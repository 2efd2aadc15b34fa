//! Central finite-difference checks of every differentiable tape op in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{BnState, Mode, Padding, Tape, Var};
use crate::detect::assign::assign_labeled_targets;
use crate::detect::{detection_loss, Anchor, BoundingBox, HeadGeometry, LossWeights};
use crate::error::Result;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1)`: relative for gradients of unit scale and
/// above, absolute below, so round-off on near-zero entries is not amplified.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn projected(tape: &mut Tape<f64>, inputs: &[Tensor<f64>], proj_seed: u64, f: &Build) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let out = f(tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let r = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok((tape.sum(p)?, vars))
}

/// Largest relative error between the tape gradient and central differences
/// of `sum(f(inputs) * R)` for a fixed random projection `R`, over every
/// element of every input.
pub fn check_gradient(inputs: &[Tensor<f64>], proj_seed: u64, f: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, vars) = projected(&mut tape, inputs, proj_seed, f)?;
    let grads = tape.backward(loss)?;
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = projected(&mut tape, inputs, proj_seed, f)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    /// Input shapes of the worst case.
    pub worst_shapes: Vec<Vec<usize>>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `min_abs` away from zero, so kinks at the origin stay
/// outside the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(min_abs..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.01 apart in random order, so pooling windows
/// never tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

struct Case<'a> {
    inputs: Vec<Tensor<f64>>,
    build: Box<Build<'a>>,
}

type CaseGen = fn(&mut ChaCha8Rng) -> Case<'static>;

fn r(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let (n, c, f, k) = (r(rng, 1, 2), r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 3));
    let stride = r(rng, 1, 2);
    let padding = if rng.random_bool(0.5) { Padding::Valid } else { Padding::Same };
    let (h, w) = (r(rng, k, 6), r(rng, k, 6));
    Case {
        inputs: vec![
            uniform(rng, &[n, c, h, w], -1.0, 1.0),
            uniform(rng, &[f, c, k, k], -1.0, 1.0),
            uniform(rng, &[f], -1.0, 1.0),
        ],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding)),
    }
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = [r(rng, 1, 2), r(rng, 1, 3), r(rng, 2, 7), r(rng, 2, 7)];
    Case {
        inputs: vec![distinct(rng, &shape)],
        build: Box::new(|t, v| t.maxpool2d(v[0])),
    }
}

fn bn_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.random_bool(0.5) {
        vec![r(rng, 2, 5), r(rng, 1, 4)]
    } else {
        vec![r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 4), r(rng, 2, 4)]
    }
}

fn batchnorm_train_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = bn_shape(rng);
    let c = shape[1];
    Case {
        inputs: vec![
            uniform(rng, &shape, -2.0, 2.0),
            uniform(rng, &[c], 0.5, 1.5),
            uniform(rng, &[c], -0.5, 0.5),
        ],
        build: Box::new(|t, v| t.batchnorm(v[0], v[1], v[2], &mut BnState::default(), Mode::Train, 0.99, 1e-3)),
    }
}

fn batchnorm_infer_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = bn_shape(rng);
    let c = shape[1];
    let state = BnState {
        running_mean: Some((0..c).map(|_| rng.random_range(-1.0..1.0)).collect()),
        running_var: Some((0..c).map(|_| rng.random_range(0.2..2.0)).collect()),
    };
    Case {
        inputs: vec![
            uniform(rng, &shape, -2.0, 2.0),
            uniform(rng, &[c], 0.5, 1.5),
            uniform(rng, &[c], -0.5, 0.5),
        ],
        build: Box::new(move |t, v| t.batchnorm(v[0], v[1], v[2], &mut state.clone(), Mode::Infer, 0.99, 1e-3)),
    }
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = r(rng, 1, 4);
    (0..rank).map(|_| r(rng, 1, 4)).collect()
}

fn relu_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    Case {
        inputs: vec![away_from_zero(rng, &shape, 1e-3)],
        build: Box::new(|t, v| t.relu(v[0])),
    }
}

fn leaky_relu_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    let slope = rng.random_range(0.01..0.3);
    Case {
        inputs: vec![away_from_zero(rng, &shape, 1e-3)],
        build: Box::new(move |t, v| t.leaky_relu(v[0], slope)),
    }
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    Case {
        inputs: vec![uniform(rng, &shape, -4.0, 4.0)],
        build: Box::new(|t, v| t.sigmoid(v[0])),
    }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = [r(rng, 1, 4), r(rng, 2, 6)];
    Case {
        inputs: vec![uniform(rng, &shape, -3.0, 3.0)],
        build: Box::new(|t, v| t.softmax(v[0])),
    }
}

fn dropout_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    let p = rng.random_range(0.1..0.7);
    let mask_seed: u64 = rng.random();
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
        // Same mask on every evaluation.
        build: Box::new(move |t, v| t.dropout(v[0], p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed))),
    }
}

fn nchw(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4), r(rng, 1, 4)]
}

fn global_avg_pool_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = nchw(rng);
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
        build: Box::new(|t, v| t.global_avg_pool(v[0])),
    }
}

fn flatten_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = nchw(rng);
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
        build: Box::new(|t, v| t.flatten(v[0])),
    }
}

fn scale_channels_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = nchw(rng);
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape[..2], 0.0, 1.0)],
        build: Box::new(|t, v| t.scale_channels(v[0], v[1])),
    }
}

fn add_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)],
        build: Box::new(|t, v| t.add(v[0], v[1])),
    }
}

fn mul_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)],
        build: Box::new(|t, v| t.mul(v[0], v[1])),
    }
}

fn linear_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let (n, din, dout) = (r(rng, 1, 4), r(rng, 1, 6), r(rng, 1, 5));
    Case {
        inputs: vec![
            uniform(rng, &[n, din], -1.0, 1.0),
            uniform(rng, &[din, dout], -1.0, 1.0),
            uniform(rng, &[dout], -1.0, 1.0),
        ],
        build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    }
}

fn sum_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
        build: Box::new(|t, v| t.sum(v[0])),
    }
}

/// Squeeze, two-layer excitation, and channel rescaling.
fn se_block_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let [n, c, h, w] = [r(rng, 1, 3), r(rng, 2, 6), r(rng, 1, 4), r(rng, 1, 4)];
    let hidden = r(rng, 1, 3);
    Case {
        inputs: vec![
            uniform(rng, &[n, c, h, w], -1.0, 1.0),
            uniform(rng, &[c, hidden], -1.0, 1.0),
            // Bias keeps the hidden pre-activations away from the ReLU kink.
            away_from_zero(rng, &[hidden], 0.5),
            uniform(rng, &[hidden, c], -1.0, 1.0),
            uniform(rng, &[c], -1.0, 1.0),
        ],
        build: Box::new(|t, v| {
            let s = t.global_avg_pool(v[0])?;
            let z = t.linear(s, v[1], v[2])?;
            let z = t.relu(z)?;
            let e = t.linear(z, v[3], v[4])?;
            let e = t.sigmoid(e)?;
            t.scale_channels(v[0], e)
        }),
    }
}

fn one_hot_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[rows, cols]);
    for row in 0..rows {
        let k = rng.random_range(0..cols);
        t.data_mut()[row * cols + k] = 1.0;
    }
    t
}

fn cce_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let (rows, cols) = (r(rng, 1, 5), r(rng, 2, 5));
    let target = one_hot_rows(rng, rows, cols);
    let weights: Option<Vec<f64>> = rng.random_bool(0.5).then(|| (0..cols).map(|_| rng.random_range(0.5..2.0)).collect());
    Case {
        inputs: vec![uniform(rng, &[rows, cols], -2.0, 2.0)],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            t.categorical_cross_entropy(p, &target, weights.as_deref())
        }),
    }
}

fn bce_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    let target = uniform(rng, &shape, 0.0, 1.0);
    Case {
        inputs: vec![uniform(rng, &shape, -3.0, 3.0)],
        build: Box::new(move |t, v| {
            let p = t.sigmoid(v[0])?;
            t.binary_cross_entropy(p, &target)
        }),
    }
}

fn mse_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let shape = small_shape(rng);
    let target = uniform(rng, &shape, -1.0, 1.0);
    Case {
        inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
        build: Box::new(move |t, v| t.mse(v[0], &target)),
    }
}

fn detection_loss_case(rng: &mut ChaCha8Rng) -> Case<'static> {
    let stride = 8;
    let geom = HeadGeometry {
        anchors: (0..r(rng, 1, 3))
            .map(|_| Anchor::new(rng.random_range(4.0..20.0), rng.random_range(4.0..20.0)))
            .collect(),
        classes: r(rng, 1, 2),
        stride,
        grid_w: r(rng, 2, 4),
        grid_h: r(rng, 2, 4),
    };
    let n = r(rng, 1, 2);
    let (iw, ih) = (geom.image_width(), geom.image_height());
    let targets = (0..n)
        .map(|_| {
            let boxes: Vec<(BoundingBox, usize)> = (0..r(rng, 0, 3))
                .map(|_| {
                    let x0 = rng.random_range(0.0..iw - 3.0);
                    let y0 = rng.random_range(0.0..ih - 3.0);
                    let x1 = rng.random_range(x0 + 2.0..iw);
                    let y1 = rng.random_range(y0 + 2.0..ih);
                    (BoundingBox::new(x0, y0, x1, y1).expect("ordered"), rng.random_range(0..geom.classes))
                })
                .collect();
            assign_labeled_targets(&boxes, std::slice::from_ref(&geom))
        })
        .collect::<Result<Vec<_>>>()
        .expect("boxes lie inside the grid");
    let shape = [n, geom.channels(), geom.grid_h, geom.grid_w];
    let weights = LossWeights {
        objectness: rng.random_range(0.5..2.0),
        box_offsets: rng.random_range(0.5..2.0),
        class: rng.random_range(0.5..2.0),
    };
    Case {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(move |t, v| Ok(detection_loss(t, &v[..1], &targets, &weights)?.0)),
    }
}

const OPS: &[(&str, CaseGen)] = &[
    ("conv2d", conv_case),
    ("maxpool2d", maxpool_case),
    ("batchnorm_train", batchnorm_train_case),
    ("batchnorm_infer", batchnorm_infer_case),
    ("relu", relu_case),
    ("leaky_relu", leaky_relu_case),
    ("sigmoid", sigmoid_case),
    ("softmax", softmax_case),
    ("dropout", dropout_case),
    ("global_avg_pool", global_avg_pool_case),
    ("flatten", flatten_case),
    ("scale_channels", scale_channels_case),
    ("add", add_case),
    ("mul", mul_case),
    ("linear", linear_case),
    ("sum", sum_case),
    ("se_block", se_block_case),
    ("categorical_cross_entropy", cce_case),
    ("binary_cross_entropy", bce_case),
    ("mse", mse_case),
    ("detection_loss", detection_loss_case),
];

pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

/// Checks every op on `cases` random shapes each.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<OpReport>> {
    OPS.iter()
        .enumerate()
        .map(|(i, (op, gen))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut report = OpReport {
                op,
                cases,
                max_rel_error: 0.0,
                worst_shapes: Vec::new(),
            };
            for _ in 0..cases {
                let case = gen(&mut rng);
                let err = check_gradient(&case.inputs, rng.random(), &*case.build)?;
                if err >= report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_shapes = case.inputs.iter().map(|t| t.shape().to_vec()).collect();
                }
            }
            Ok(report)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_gradient_is_caught() {
        // A scalar op whose declared gradient is off by a factor of two.
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let bad = |t: &mut Tape<f64>, v: &[Var]| {
            let xs = t.value(v[0]).data().to_vec();
            let value = xs.iter().map(|a| a * a).sum();
            t.scalar_with_grad("bad_square", v[0], value, xs.iter().map(|a| a).copied().collect())
        };
        assert!(check_gradient(&[x.clone()], 1, &bad).unwrap() > 0.1);
        let good = |t: &mut Tape<f64>, v: &[Var]| {
            let xs = t.value(v[0]).data().to_vec();
            let value = xs.iter().map(|a| a * a).sum();
            t.scalar_with_grad("square", v[0], value, xs.iter().map(|a| 2.0 * a).collect())
        };
        assert!(check_gradient(&[x], 1, &good).unwrap() < 1e-8);
    }

    #[test]
    fn every_op_passes_a_few_cases() {
        for rep in run_suite(11, 2).unwrap() {
            assert!(rep.passed(), "{rep:?}");
        }
    }
}
