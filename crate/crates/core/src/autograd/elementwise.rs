use rand::Rng;

use super::{Mode, Op, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::tensor::{Element, Tensor};

fn map<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

/// Logistic function without overflow for large |v|.
pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let cols = *y.shape().last().expect("shape");
    let mut dx = Vec::with_capacity(g.len());
    for (yr, gr) in y.data().chunks(cols).zip(g.chunks(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
    }
    dx
}

pub(crate) fn linear_backward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &[T]) -> Result<[Vec<T>; 3]> {
    let [n, din] = x.dims2("linear")?;
    let [_, dout] = w.dims2("linear")?;
    let mut dx = vec![T::zero(); n * din];
    T::gemm(n, dout, din, T::one(), g, false, w.data(), true, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); din * dout];
    T::gemm(din, n, dout, T::one(), x.data(), true, g, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); dout];
    for row in g.chunks(dout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok([dx, dw, db])
}

impl<T: Element> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| if v > T::zero() { v } else { T::zero() })?;
        self.push("relu", out, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let out = map(self.value(x), |v| if v > T::zero() { v } else { v * s })?;
        self.push("leaky_relu", out, Op::LeakyRelu { x, slope: s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), sigmoid)?;
        self.push("sigmoid", out, Op::Sigmoid { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().expect("shape");
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - max).exp()));
            let total: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / total);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { x })
    }

    /// Inverted dropout: in train mode zeroes each value with probability `p`
    /// and scales survivors by `1 / (1 - p)`; in infer mode returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract("dropout", format!("rate {p} outside [0, 1)")));
        }
        if mode == Mode::Infer {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        self.push("dropout", out, Op::Dropout { x, mask })
    }

    /// Mean over the spatial axes: NCHW to (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("global_avg_pool")?;
        let inv = T::one() / T::of((h * w) as f64);
        let out: Vec<T> = xv
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        self.push("global_avg_pool", Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_grad(false).reshape(shape)?;
        self.push("reshape", out, Op::Reshape { x })
    }

    /// (N, ...) to (N, product of the rest).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    /// Multiplies each channel plane of NCHW `x` by the matching entry of (N, C) `s`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        let [n, c, h, w] = xv.dims4("scale_channels")?;
        if sv.shape() != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                left: xv.shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let spatial = h * w;
        let out: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv.data()[i / spatial])
            .collect();
        self.push("scale_channels", Tensor::new(xv.shape().to_vec(), out)?, Op::ScaleChannels { x, s })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add", out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("mul", out, Op::Mul { a, b })
    }

    /// `x (N, in) @ w (in, out) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, din] = xv.dims2("linear")?;
        let [win, dout] = wv.dims2("linear")?;
        if win != din || self.shape(b) != [dout] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(n, din, dout, T::one(), xv.data(), false, wv.data(), false, T::one(), &mut out);
        self.push("linear", Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&[1, 4], vec![0.7; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[5, 7], |i| (i as f32 * 1.37).sin() * 30.0));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_and_relu_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&[3], vec![0.0, -2.0, 3.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let l = tape.leaky_relu(x, 0.1).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0, -0.2, 3.0]);
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[2.5, 2.0]);
    }

    #[test]
    fn dropout_infer_is_identity_and_rate_is_checked() {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::from_fn(&[4, 4], |i| i as f32));
        let y = tape.dropout(x, 0.5, Mode::Infer, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn scale_channels_broadcasts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.constant(tensor(&[1, 2], vec![10.0, 0.5]));
        let y = tape.scale_channels(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, 1.5, 2.0]);
        let bad = tape.constant(tensor(&[1, 3], vec![1.0; 3]));
        assert!(tape.scale_channels(x, bad).is_err());
    }

    #[test]
    fn linear_matches_hand_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&[1, 2], vec![1.0, 2.0]));
        let w = tape.constant(tensor(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]));
        let b = tape.constant(tensor(&[3], vec![0.0, 1.0, 2.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 3.0, 2.0]);
    }
}
