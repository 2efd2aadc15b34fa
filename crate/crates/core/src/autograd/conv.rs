//! Convolution via im2col + GEMM, and 2x2 max pooling.

use super::{Op, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::par;
use crate::tensor::{Element, Tensor};

/// Spatial padding scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding.
    #[default]
    Valid,
    /// `(k - 1) / 2` zeros on each side.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// `floor((input + 2 * pad - kernel) / stride) + 1`, or `None` if the kernel
/// does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && kernel > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let osp = g.out_spatial();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * osp..(row + 1) * osp];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let osp = g.out_spatial();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * osp..(row + 1) * osp];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            prow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, ConvGeom)> {
    let [n, c, h, wd] = x.dims4("conv2d")?;
    let [f, wc, kh, kw] = w.dims4("conv2d")?;
    if wc != c || kh != kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape() != [f] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(contract("conv2d", "stride must be positive"));
    }
    let k = kh;
    let pad = padding.amount(k);
    let (Some(oh), Some(ow)) = (
        conv_output_extent(h, k, stride, pad),
        conv_output_extent(wd, k, stride, pad),
    ) else {
        return Err(contract(
            "conv2d",
            format!("kernel {k}x{k} does not fit input {h}x{wd} with padding {pad}"),
        ));
    };
    let geom = ConvGeom {
        n,
        c,
        h,
        w: wd,
        f,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let osp = geom.out_spatial();
    let patch = geom.patch();
    let in_sz = c * h * wd;
    let mut out = vec![T::zero(); n * f * osp];
    par::for_each_chunk_mut(&mut out, f * osp, |i, dst| {
        let mut cols = vec![T::zero(); patch * osp];
        im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &geom, &mut cols);
        for (fi, row) in dst.chunks_mut(osp).enumerate() {
            row.fill(b.data()[fi]);
        }
        T::gemm(f, patch, osp, T::one(), w.data(), false, &cols, false, T::one(), dst);
    });
    Ok((Tensor::new(vec![n, f, oh, ow], out)?, geom))
}

/// Returns `[dx, dw, db]`, each only when requested.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    geom: &ConvGeom,
    want: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let ConvGeom { n, c, h, w: wd, f, .. } = *geom;
    let osp = geom.out_spatial();
    let patch = geom.patch();
    let in_sz = c * h * wd;

    let db = want[2].then(|| {
        let mut db = vec![T::zero(); f];
        for gi in g.chunks(f * osp) {
            for (fi, row) in gi.chunks(osp).enumerate() {
                db[fi] += row.iter().copied().sum::<T>();
            }
        }
        db
    });

    if !want[0] && !want[1] {
        return [None, None, db];
    }

    // Per-sample partial weight gradients, summed afterwards in sample order.
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = par::map_range(n, |i| {
        let gi = &g[i * f * osp..(i + 1) * f * osp];
        let mut cols = vec![T::zero(); patch * osp];
        let dw = want[1].then(|| {
            im2col(&x.data()[i * in_sz..(i + 1) * in_sz], geom, &mut cols);
            let mut dw = vec![T::zero(); f * patch];
            T::gemm(f, osp, patch, T::one(), gi, false, &cols, true, T::zero(), &mut dw);
            dw
        });
        let dx = want[0].then(|| {
            T::gemm(patch, f, osp, T::one(), w.data(), true, gi, false, T::zero(), &mut cols);
            let mut dx = vec![T::zero(); in_sz];
            col2im(&cols, geom, &mut dx);
            dx
        });
        (dx, dw)
    });

    let mut dx = want[0].then(|| Vec::with_capacity(n * in_sz));
    let mut dw = want[1].then(|| vec![T::zero(); f * patch]);
    for (sdx, sdw) in per_sample {
        if let (Some(acc), Some(s)) = (dx.as_mut(), sdx) {
            acc.extend_from_slice(&s);
        }
        if let (Some(acc), Some(s)) = (dw.as_mut(), sdw) {
            for (a, v) in acc.iter_mut().zip(&s) {
                *a += *v;
            }
        }
    }
    [dx, dw, db]
}

pub(crate) fn maxpool2d_forward<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("maxpool2d")?;
    if h < 2 || w < 2 {
        return Err(contract(
            "maxpool2d",
            format!("2x2 window larger than input {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

impl<T: Element> Tape<T> {
    /// 2-D convolution. `x` is NCHW, `w` is (F, C, k, k), `b` has length F.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (out, geom) = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom })
    }

    /// 2x2 max pooling with stride 2 (floor on odd extents).
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = maxpool2d_forward(self.value(x))?;
        self.push("maxpool2d", out, Op::MaxPool { x, argmax })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn first_cnn_senet_block_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 200, 200]);
        let w = Tensor::<f32>::zeros(&[32, 3, 5, 5]);
        let b = Tensor::<f32>::zeros(&[32]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 32, 196, 196]);
        let (p, _) = maxpool2d_forward(&y).unwrap();
        assert_eq!(p.shape(), &[1, 32, 98, 98]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = t(&[1, 1, 3, 3], vec![0.0; 9]);
        let w = t(&[2, 1, 2, 2], vec![0.3, -1.0, 2.0, 7.0, 1.0, 1.0, 1.0, 1.0]);
        let b = t(&[2], vec![0.0, 0.0]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_gives_window_sums() {
        // Identity-like 4x4 pattern: ones on the diagonal plus a marker.
        let mut data = vec![0.0; 16];
        for i in 0..4 {
            data[i * 4 + i] = 1.0;
        }
        data[3] = 5.0;
        let x = t(&[1, 1, 4, 4], data.clone());
        let w = t(&[1, 1, 2, 2], vec![1.0; 4]);
        let b = t(&[1], vec![0.0]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // Hand-computed 2x2 window sums.
        let expected = [2.0, 1.0, 5.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn same_padding_and_stride_follow_closed_form() {
        let x = Tensor::<f32>::zeros(&[1, 2, 9, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        let (y, _) = conv2d_forward(&x, &w, &b, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5, 4]);
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        let err = conv2d_forward(&x, &w, &b, 1, Padding::Valid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(conv2d_forward(&x, &w, &b, 1, Padding::Valid).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_grad(true));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_of_constant_is_constant() {
        let x = Tensor::<f32>::full(&[2, 3, 7, 6], 1.5);
        let (y, _) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_rejects_tiny_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 4]);
        assert!(maxpool2d_forward(&x).is_err());
    }
}
