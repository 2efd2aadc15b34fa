//! Declarative network descriptions and build-time shape inference.

use serde::{Deserialize, Serialize};

use crate::autograd::{conv_output_extent, Padding};
use crate::detect::Anchor;
use crate::error::{Error, Result};

/// Network input extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// One layer of a sequential network. Layers may refer back to earlier
/// layers by absolute index (`ResidualAdd`, `Route`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm,
    /// Squeeze-and-excitation recalibration with bottleneck `channels / ratio`
    /// (rounded up, at least one unit).
    SeBlock {
        ratio: usize,
        #[serde(default)]
        residual: bool,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    MaxPool,
    Dense {
        units: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
    Flatten,
    /// Adds the output of layer `from` to the current activation.
    ResidualAdd {
        from: usize,
    },
    /// Replaces the current activation with the output of layer `from`.
    Route {
        from: usize,
    },
    /// Marks the current activation as a raw detection grid for `anchors`.
    DetectHead {
        anchors: Vec<Anchor>,
        classes: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::SeBlock { .. } => "se_block",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ResidualAdd { .. } => "residual_add",
            LayerSpec::Route { .. } => "route",
            LayerSpec::DetectHead { .. } => "detect_head",
        }
    }
}

/// Hidden width of an SE bottleneck.
pub fn se_hidden(channels: usize, ratio: usize) -> usize {
    channels.div_ceil(ratio.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: InputShape,
    pub class_count: usize,
    pub se_ratio: usize,
    pub batch_size: usize,
    pub layers: Vec<LayerSpec>,
}

fn bad(index: usize, layer: &LayerSpec, detail: impl std::fmt::Display) -> Error {
    Error::Structural(format!("layer {index} ({}): {detail}", layer.kind()))
}

impl NetworkSpec {
    /// Output shape (without the batch axis) of every layer, validating that
    /// consecutive layers chain.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let InputShape {
            height,
            width,
            channels,
        } = self.input_shape;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Structural("empty input shape".into()));
        }
        if self.class_count == 0 || self.batch_size == 0 {
            return Err(Error::Structural("class count and batch size must be positive".into()));
        }
        if matches!(self.layers.last(), Some(LayerSpec::Softmax)) && self.class_count < 2 {
            return Err(Error::Structural("a classifier needs at least 2 classes".into()));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = vec![channels, height, width];
        for (i, layer) in self.layers.iter().enumerate() {
            let earlier = |from: usize| -> Result<&Vec<usize>> {
                shapes
                    .get(from)
                    .ok_or_else(|| bad(i, layer, format!("refers to layer {from}, which is not earlier")))
            };
            cur = match layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [_, h, w] = cur[..] else {
                        return Err(bad(i, layer, format!("needs a feature map, got {cur:?}")));
                    };
                    if *filters == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad(i, layer, "filters, kernel and stride must be positive"));
                    }
                    let pad = padding.amount(*kernel);
                    match (
                        conv_output_extent(h, *kernel, *stride, pad),
                        conv_output_extent(w, *kernel, *stride, pad),
                    ) {
                        (Some(oh), Some(ow)) => vec![*filters, oh, ow],
                        _ => return Err(bad(i, layer, format!("kernel {kernel} does not fit {h}x{w}"))),
                    }
                }
                LayerSpec::BatchNorm
                | LayerSpec::Relu
                | LayerSpec::LeakyRelu { .. }
                | LayerSpec::Dropout { .. } => {
                    if let LayerSpec::Dropout { rate } = layer {
                        if !(0.0..1.0).contains(rate) {
                            return Err(bad(i, layer, format!("rate {rate} outside [0, 1)")));
                        }
                    }
                    cur
                }
                LayerSpec::SeBlock { ratio, .. } => {
                    if cur.len() != 3 || *ratio == 0 {
                        return Err(bad(i, layer, "needs a feature map and a positive ratio"));
                    }
                    cur
                }
                LayerSpec::MaxPool => match cur[..] {
                    [c, h, w] if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
                    _ => return Err(bad(i, layer, format!("2x2 window does not fit {cur:?}"))),
                },
                LayerSpec::Dense { units } => {
                    if cur.len() != 1 || *units == 0 {
                        return Err(bad(i, layer, format!("needs a flat input, got {cur:?}")));
                    }
                    vec![*units]
                }
                LayerSpec::Softmax => {
                    if cur.len() != 1 {
                        return Err(bad(i, layer, "needs a flat input"));
                    }
                    cur
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::ResidualAdd { from } => {
                    let other = earlier(*from)?;
                    if *other != cur {
                        return Err(bad(i, layer, format!("cannot add {other:?} to {cur:?}")));
                    }
                    cur
                }
                LayerSpec::Route { from } => earlier(*from)?.clone(),
                LayerSpec::DetectHead { anchors, classes } => {
                    let expected = anchors.len() * (5 + classes);
                    if cur.len() != 3 || cur[0] != expected || anchors.is_empty() {
                        return Err(bad(
                            i,
                            layer,
                            format!("expected {expected} channels for {} anchors, got {cur:?}", anchors.len()),
                        ));
                    }
                    cur
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Output shape of the final layer.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .infer_shapes()?
            .pop()
            .unwrap_or_else(|| vec![self.input_shape.channels, self.input_shape.height, self.input_shape.width]))
    }

    /// Indices of detection-head layers, in order.
    pub fn detect_heads(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::DetectHead { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Structural(format!("bad network spec: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(layers: Vec<LayerSpec>) -> NetworkSpec {
        NetworkSpec {
            name: "t".into(),
            input_shape: InputShape {
                height: 8,
                width: 8,
                channels: 3,
            },
            class_count: 2,
            se_ratio: 16,
            batch_size: 1,
            layers,
        }
    }

    #[test]
    fn rejects_dense_on_feature_map() {
        assert!(spec(vec![LayerSpec::Dense { units: 4 }]).infer_shapes().is_err());
    }

    #[test]
    fn residual_requires_equal_shapes() {
        let s = spec(vec![
            LayerSpec::Conv {
                filters: 3,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::ResidualAdd { from: 0 },
            LayerSpec::Conv {
                filters: 4,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::ResidualAdd { from: 1 },
        ]);
        let err = s.infer_shapes().unwrap_err().to_string();
        assert!(err.contains("layer 3"), "{err}");
    }

    #[test]
    fn forward_references_are_rejected() {
        assert!(spec(vec![LayerSpec::Route { from: 0 }]).infer_shapes().is_err());
    }

    #[test]
    fn se_hidden_rounds_up() {
        assert_eq!(se_hidden(32, 16), 2);
        assert_eq!(se_hidden(3, 16), 1);
        assert_eq!(se_hidden(17, 16), 2);
    }

    #[test]
    fn json_round_trip() {
        let s = spec(vec![LayerSpec::SeBlock { ratio: 4, residual: false }, LayerSpec::Flatten]);
        assert_eq!(NetworkSpec::from_json(&s.to_json()).unwrap(), s);
    }
}
