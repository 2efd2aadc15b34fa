//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes and hand back lightweight [`Var`] handles; [`Tape::backward`]
//! consumes the tape and returns the gradients of every differentiable leaf.

mod conv;
mod elementwise;
mod loss;
mod norm;

use crate::error::{contract, Error, Result};
use crate::tensor::{Element, Tensor};

pub use conv::{conv_output_extent, ConvGeom, Padding};
pub use elementwise::sigmoid;
pub use norm::BnState;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether layers run with training behaviour (batch statistics, dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelLayout {
    pub n: usize,
    pub c: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub(crate) fn of<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<Self> {
        match *t.shape() {
            [n, c] => Ok(Self { n, c, spatial: 1 }),
            [n, c, h, w] => Ok(Self {
                n,
                c,
                spatial: h * w,
            }),
            ref s => Err(contract(op, format!("expected (N,C) or NCHW, got {s:?}"))),
        }
    }

    #[inline]
    pub(crate) fn channel_of(&self, idx: usize) -> usize {
        (idx / self.spatial) % self.c
    }
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        layout: ChannelLayout,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    /// Scalar output whose local gradient w.r.t. `input` was computed eagerly.
    ScalarGrad {
        input: Var,
        grad: Vec<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = op_inputs(&op).iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a scalar-valued function of `input` whose gradient is already
    /// known. This is the extension point for fused losses.
    pub fn scalar_with_grad(
        &mut self,
        op_name: &'static str,
        input: Var,
        value: T,
        grad: Vec<T>,
    ) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: self.shape(input).to_vec(),
                right: vec![grad.len()],
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.push(op_name, Tensor::scalar(value), Op::ScalarGrad { input, grad })
    }

    /// Back-propagates from a single-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g)? {
                if !self.needs(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut out = Gradients {
            grads: Vec::with_capacity(self.nodes.len()),
        };
        for (node, g) in self.nodes.into_iter().zip(leaves) {
            let t = match g {
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::NonFinite { op: "backward" })
                }
                Some(g) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                None => None,
            };
            out.grads.push(t);
        }
        Ok(out)
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom } => conv::conv2d_backward(
                val(*x),
                val(*w),
                g,
                geom,
                [self.needs(*x), self.needs(*w), self.needs(*b)],
            )
            .into_iter()
            .zip([*x, *w, *b])
            .filter_map(|(gr, v)| gr.map(|gr| (v, gr)))
            .collect(),
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                layout,
            } => {
                let [dx, dgamma, dbeta] =
                    norm::batchnorm_backward(val(*gamma).data(), xhat, inv_std, *train, layout, g);
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu { x } => vec![(
                *x,
                val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
            )],
            Op::LeakyRelu { x, slope } => vec![(
                *x,
                val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { gi * *slope })
                    .collect(),
            )],
            Op::Sigmoid { x } => vec![(
                *x,
                out.data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (T::one() - y))
                    .collect(),
            )],
            Op::Softmax { x } => vec![(*x, elementwise::softmax_backward(out, g))],
            Op::Dropout { x, mask } => {
                vec![(*x, mask.iter().zip(g).map(|(&m, &gi)| m * gi).collect())]
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = val(*x).dims4("global_avg_pool")?;
                let spatial = h * w;
                let inv = T::one() / T::of(spatial as f64);
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (nc, chunk) in dx.chunks_mut(spatial).enumerate() {
                    chunk.fill(g[nc] * inv);
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::ScaleChannels { x, s } => {
                let xv = val(*x);
                let sv = val(*s);
                let [_, _, h, w] = xv.dims4("scale_channels")?;
                let spatial = h * w;
                let mut dx = vec![T::zero(); xv.numel()];
                let mut ds = vec![T::zero(); sv.numel()];
                for nc in 0..sv.numel() {
                    let range = nc * spatial..(nc + 1) * spatial;
                    let scale = sv.data()[nc];
                    let mut acc = T::zero();
                    for i in range {
                        dx[i] = g[i] * scale;
                        acc += g[i] * xv.data()[i];
                    }
                    ds[nc] = acc;
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let av = val(*a).data();
                let bv = val(*b).data();
                vec![
                    (*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()),
                    (*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect()),
                ]
            }
            Op::Linear { x, w, b } => {
                let [dx, dw, db] = elementwise::linear_backward(val(*x), val(*w), g)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::ScalarGrad { input, grad } => {
                vec![(*input, grad.iter().map(|&v| v * g[0]).collect())]
            }
        })
    }
}

fn op_inputs<T: Element>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::MaxPool { x, .. }
        | Op::Relu { x }
        | Op::LeakyRelu { x, .. }
        | Op::Sigmoid { x }
        | Op::Softmax { x }
        | Op::Dropout { x, .. }
        | Op::GlobalAvgPool { x }
        | Op::Reshape { x }
        | Op::Sum { x } => vec![*x],
        Op::ScaleChannels { x, s } => vec![*x, *s],
        Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::ScalarGrad { input, .. } => vec![*input],
    }
}

/// Gradients of every differentiable leaf, produced by [`Tape::backward`].
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_grad(true))
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0, 0.25];
        let x = leaf(&mut tape, &[4], data.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), &expected[..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        assert!(matches!(tape.add(x, x), Err(Error::NonFinite { .. })));
    }
}
