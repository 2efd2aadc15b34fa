//! Executable networks: parameters plus a [`NetworkSpec`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{se_hidden, LayerSpec, NetworkSpec};
use crate::autograd::{BnState, Gradients, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::{Element, Tensor};

/// Batch-norm hyperparameters shared by every layer of a model.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Activation of the last layer.
    pub output: Var,
    /// Raw grids of detection heads, in layer order.
    pub heads: Vec<Var>,
    /// Tape handles of the model parameters, aligned with [`Model::parameters`].
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Parameter<T>>,
    /// First parameter index of each layer.
    offsets: Vec<usize>,
    bn: Vec<Option<BnState<T>>>,
}

fn he_uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Parameter names and shapes a layer owns, given its input shape.
fn layer_param_shapes(index: usize, layer: &LayerSpec, input: &[usize]) -> Vec<(String, Vec<usize>)> {
    let name = |suffix: &str| format!("{index}.{}.{suffix}", layer.kind());
    match layer {
        LayerSpec::Conv { filters, kernel, .. } => vec![
            (name("weight"), vec![*filters, input[0], *kernel, *kernel]),
            (name("bias"), vec![*filters]),
        ],
        LayerSpec::BatchNorm => vec![(name("gamma"), vec![input[0]]), (name("beta"), vec![input[0]])],
        LayerSpec::SeBlock { ratio, .. } => {
            let c = input[0];
            let h = se_hidden(c, *ratio);
            vec![
                (name("reduce.weight"), vec![c, h]),
                (name("reduce.bias"), vec![h]),
                (name("expand.weight"), vec![h, c]),
                (name("expand.bias"), vec![c]),
            ]
        }
        LayerSpec::Dense { units } => vec![
            (name("weight"), vec![input[0], *units]),
            (name("bias"), vec![*units]),
        ],
        _ => Vec::new(),
    }
}

fn init_param<T: Element>(rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Tensor<T> {
    if name.ends_with(".gamma") {
        Tensor::full(shape, T::one())
    } else if name.ends_with("bias") || name.ends_with(".beta") {
        Tensor::zeros(shape)
    } else {
        let fan_in = match shape {
            [_, c, k, _] => c * k * k,
            [fan_in, _] => *fan_in,
            _ => shape.iter().product(),
        };
        he_uniform(rng, shape, fan_in)
    }
}

impl<T: Element> Model<T> {
    /// Builds a freshly initialized model, validating the spec's shape chain.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |name, shape| init_param(&mut rng, name, shape))
    }

    /// Builds a model whose parameters come from `source(name, shape)`.
    pub fn build(spec: NetworkSpec, mut source: impl FnMut(&str, &[usize]) -> Tensor<T>) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let input = vec![
            spec.input_shape.channels,
            spec.input_shape.height,
            spec.input_shape.width,
        ];
        let mut params = Vec::new();
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut bn = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let in_shape = if i == 0 { &input } else { &shapes[i - 1] };
            offsets.push(params.len());
            for (name, shape) in layer_param_shapes(i, layer, in_shape) {
                let t = source(&name, &shape);
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "model parameter",
                        left: shape,
                        right: t.shape().to_vec(),
                    });
                }
                params.push(Parameter::new(name, t));
            }
            bn.push(matches!(layer, LayerSpec::BatchNorm).then(BnState::default));
        }
        Ok(Self {
            spec,
            shapes,
            params,
            offsets,
            bn,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Per-layer output shapes without the batch axis.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    /// Batch-norm running statistics, indexed by layer.
    pub fn bn_states(&self) -> &[Option<BnState<T>>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [Option<BnState<T>>] {
        &mut self.bn
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            offsets: self.offsets.clone(),
            bn: self.bn.iter().map(|s| s.as_ref().map(BnState::cast)).collect(),
        }
    }

    /// Training-mode forward pass: batch statistics, active dropout, and
    /// running-statistic updates.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, input: Var, rng: &mut dyn RngCore) -> Result<Forward> {
        let mut states = self.bn.clone();
        let out = self.run(tape, input, Mode::Train, Some(rng), &mut states)?;
        self.bn = states;
        Ok(out)
    }

    /// Inference-mode forward pass. Leaves the model untouched.
    pub fn forward_infer(&self, tape: &mut Tape<T>, input: Var) -> Result<Forward> {
        let mut states = self.bn.clone();
        self.run(tape, input, Mode::Infer, None, &mut states)
    }

    /// Runs inference on a batch and returns the final activation.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let fwd = self.forward_infer(&mut tape, x)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Runs inference and returns the raw detection grids.
    pub fn predict_heads(&self, batch: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let fwd = self.forward_infer(&mut tape, x)?;
        Ok(fwd.heads.iter().map(|&h| tape.value(h).clone()).collect())
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
        states: &mut [Option<BnState<T>>],
    ) -> Result<Forward> {
        let in_shape = tape.shape(input);
        let s = &self.spec.input_shape;
        if in_shape.len() != 4 || in_shape[1..] != [s.channels, s.height, s.width] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: vec![s.channels, s.height, s.width],
                right: in_shape.to_vec(),
            });
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let t = p.tensor.clone();
                if mode == Mode::Train && p.trainable {
                    tape.leaf(t.with_grad(true))
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let mut outputs: Vec<Var> = Vec::with_capacity(self.spec.layers.len());
        let mut heads = Vec::new();
        let mut cur = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let p = &params[self.offsets[i]..];
            cur = match layer {
                LayerSpec::Conv { stride, padding, .. } => tape.conv2d(cur, p[0], p[1], *stride, *padding)?,
                LayerSpec::BatchNorm => {
                    let st = states[i].as_mut().expect("batch-norm state");
                    tape.batchnorm(cur, p[0], p[1], st, mode, BN_MOMENTUM, BN_EPSILON)?
                }
                LayerSpec::SeBlock { residual, .. } => {
                    let squeezed = tape.global_avg_pool(cur)?;
                    let hidden = tape.linear(squeezed, p[0], p[1])?;
                    let hidden = tape.relu(hidden)?;
                    let excite = tape.linear(hidden, p[2], p[3])?;
                    let excite = tape.sigmoid(excite)?;
                    let scaled = tape.scale_channels(cur, excite)?;
                    if *residual {
                        tape.add(cur, scaled)?
                    } else {
                        scaled
                    }
                }
                LayerSpec::Relu => tape.relu(cur)?,
                LayerSpec::LeakyRelu { slope } => tape.leaky_relu(cur, *slope)?,
                LayerSpec::MaxPool => tape.maxpool2d(cur)?,
                LayerSpec::Dense { .. } => tape.linear(cur, p[0], p[1])?,
                LayerSpec::Dropout { rate } => match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) => tape.dropout(cur, *rate, mode, r)?,
                    _ => cur,
                },
                LayerSpec::Softmax => tape.softmax(cur)?,
                LayerSpec::Flatten => tape.flatten(cur)?,
                LayerSpec::ResidualAdd { from } => tape.add(cur, outputs[*from])?,
                LayerSpec::Route { from } => outputs[*from],
                LayerSpec::DetectHead { .. } => {
                    heads.push(cur);
                    cur
                }
            };
            outputs.push(cur);
        }
        Ok(Forward {
            output: cur,
            heads,
            params,
        })
    }

    /// Adds `scale * d(loss)/d(param)` into each trainable parameter's
    /// gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, vars: &[Var], scale: T) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if !p.trainable {
                continue;
            }
            match grads.get(v) {
                Some(g) => p.tensor.accumulate_grad(g.data(), scale)?,
                None => p.tensor.accumulate_grad(&vec![T::zero(); p.tensor.numel()], scale)?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.take_grad();
        }
    }
}
