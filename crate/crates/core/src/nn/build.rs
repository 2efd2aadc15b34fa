use super::spec::{InputShape, LayerSpec, NetworkSpec};
use crate::autograd::Padding;
use crate::detect::{Anchor, DEFAULT_ANCHORS};
use crate::error::{Error, Result};

/// Classifier input edge length.
pub const CNN_SENET_INPUT: usize = 200;

/// (filters, kernel) of the five convolutional blocks.
const CNN_SENET_BLOCKS: [(usize, usize); 5] = [(32, 5), (64, 3), (64, 3), (128, 2), (256, 2)];

#[derive(Clone, Debug, PartialEq)]
pub struct CnnSenetOptions {
    pub input_size: usize,
    pub class_count: usize,
    pub se_ratio: usize,
    pub with_se: bool,
    /// Adds the block input back after recalibration.
    pub se_residual: bool,
    pub batch_size: usize,
}

impl CnnSenetOptions {
    pub fn new(class_count: usize) -> Self {
        Self {
            input_size: CNN_SENET_INPUT,
            class_count,
            se_ratio: 16,
            with_se: true,
            se_residual: false,
            batch_size: 16,
        }
    }
}

/// CNN-SENet at 200x200x3 with `class_count` outputs.
pub fn build_cnn_senet(class_count: usize, se_ratio: usize, with_se: bool) -> Result<NetworkSpec> {
    build_cnn_senet_with(&CnnSenetOptions {
        se_ratio,
        with_se,
        ..CnnSenetOptions::new(class_count)
    })
}

pub fn build_cnn_senet_with(opts: &CnnSenetOptions) -> Result<NetworkSpec> {
    if opts.class_count < 2 {
        return Err(Error::Config(format!(
            "classifier needs at least 2 classes, got {}",
            opts.class_count
        )));
    }
    let mut layers = Vec::new();
    for (filters, kernel) in CNN_SENET_BLOCKS {
        layers.push(LayerSpec::Conv {
            filters,
            kernel,
            stride: 1,
            padding: Padding::Valid,
        });
        layers.push(LayerSpec::BatchNorm);
        if opts.with_se {
            layers.push(LayerSpec::SeBlock {
                ratio: opts.se_ratio,
                residual: opts.se_residual,
            });
        }
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool);
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 256 },
        LayerSpec::BatchNorm,
        LayerSpec::Dense { units: 256 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense {
            units: opts.class_count,
        },
        LayerSpec::Softmax,
    ]);
    let spec = NetworkSpec {
        name: if opts.with_se { "cnn-senet" } else { "cnn-senet-no-se" }.into(),
        input_shape: InputShape {
            height: opts.input_size,
            width: opts.input_size,
            channels: 3,
        },
        class_count: opts.class_count,
        se_ratio: opts.se_ratio,
        batch_size: opts.batch_size,
        layers,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorPreset {
    /// Darknet-53 trunk with three single-conv detection heads at strides 32, 16, 8.
    Darknet53,
    /// Small four-pool stack with one stride-16 head.
    Tiny,
}

impl std::str::FromStr for DetectorPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "darknet53" => Ok(Self::Darknet53),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::Config(format!("unknown detector preset {other:?}"))),
        }
    }
}

/// Anchors used by the tiny preset: the three mid-sized default priors.
pub const TINY_ANCHORS: [Anchor; 3] = [DEFAULT_ANCHORS[2], DEFAULT_ANCHORS[3], DEFAULT_ANCHORS[4]];

/// Preset at its default input size (608 for Darknet-53, 128 for tiny).
pub fn build_detector_backbone(preset: DetectorPreset) -> Result<NetworkSpec> {
    match preset {
        DetectorPreset::Darknet53 => build_detector_backbone_at(preset, 608),
        DetectorPreset::Tiny => build_detector_backbone_at(preset, 128),
    }
}

pub fn build_detector_backbone_at(preset: DetectorPreset, input_size: usize) -> Result<NetworkSpec> {
    match preset {
        DetectorPreset::Darknet53 => darknet53(input_size),
        DetectorPreset::Tiny => build_tiny_detector(input_size, &TINY_ANCHORS, &[16, 32, 64, 64, 128]),
    }
}

fn conv(filters: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        kernel,
        stride,
        padding: Padding::Same,
    }
}

fn head_channels(anchors: &[Anchor]) -> usize {
    anchors.len() * (5 + 1)
}

/// Tiny single-grid detector. `widths` gives the filters of the four pooled
/// stages followed by the pre-head conv. No batch norm, so gradients over a
/// batch are a plain sum of per-image gradients.
pub fn build_tiny_detector(input_size: usize, anchors: &[Anchor], widths: &[usize; 5]) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    for &w in &widths[..4] {
        layers.push(conv(w, 3, 1));
        layers.push(LayerSpec::LeakyRelu { slope: 0.1 });
        layers.push(LayerSpec::MaxPool);
    }
    layers.push(conv(widths[4], 3, 1));
    layers.push(LayerSpec::LeakyRelu { slope: 0.1 });
    layers.push(conv(head_channels(anchors), 1, 1));
    layers.push(LayerSpec::DetectHead {
        anchors: anchors.to_vec(),
        classes: 1,
    });
    let spec = NetworkSpec {
        name: "tiny-detector".into(),
        input_shape: InputShape {
            height: input_size,
            width: input_size,
            channels: 3,
        },
        class_count: 1,
        se_ratio: 16,
        batch_size: 64,
        layers,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

fn darknet53(input_size: usize) -> Result<NetworkSpec> {
    let mut layers: Vec<LayerSpec> = Vec::new();
    let cbl = |layers: &mut Vec<LayerSpec>, filters, kernel, stride| {
        layers.push(conv(filters, kernel, stride));
        layers.push(LayerSpec::BatchNorm);
        layers.push(LayerSpec::LeakyRelu { slope: 0.1 });
    };
    cbl(&mut layers, 32, 3, 1);
    let mut taps = Vec::new();
    for (filters, repeats) in [(64, 1), (128, 2), (256, 8), (512, 8), (1024, 4)] {
        cbl(&mut layers, filters, 3, 2);
        for _ in 0..repeats {
            let block_input = layers.len() - 1;
            cbl(&mut layers, filters / 2, 1, 1);
            cbl(&mut layers, filters, 3, 1);
            layers.push(LayerSpec::ResidualAdd { from: block_input });
        }
        taps.push(layers.len() - 1);
    }
    // taps[2] is stride 8, taps[3] stride 16, taps[4] stride 32.
    for (tap, anchors) in [
        (taps[4], &DEFAULT_ANCHORS[6..9]),
        (taps[3], &DEFAULT_ANCHORS[3..6]),
        (taps[2], &DEFAULT_ANCHORS[0..3]),
    ] {
        if layers.len() - 1 != tap {
            layers.push(LayerSpec::Route { from: tap });
        }
        layers.push(LayerSpec::Conv {
            filters: head_channels(anchors),
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
        });
        layers.push(LayerSpec::DetectHead {
            anchors: anchors.to_vec(),
            classes: 1,
        });
    }
    let spec = NetworkSpec {
        name: "darknet53".into(),
        input_shape: InputShape {
            height: input_size,
            width: input_size,
            channels: 3,
        },
        class_count: 1,
        se_ratio: 16,
        batch_size: 64,
        layers,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_senet_block_shapes() {
        let spec = build_cnn_senet(23, 16, true).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        let pooled: Vec<&Vec<usize>> = spec
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, LayerSpec::MaxPool))
            .map(|(_, s)| s)
            .collect();
        let expected = [[32, 98, 98], [64, 48, 48], [64, 23, 23], [128, 11, 11], [256, 5, 5]];
        assert_eq!(pooled.len(), 5);
        for (got, want) in pooled.iter().zip(expected) {
            assert_eq!(got.as_slice(), want);
        }
        let flat = spec.layers.iter().position(|l| matches!(l, LayerSpec::Flatten)).unwrap();
        assert_eq!(shapes[flat], vec![6400]);
    }

    #[test]
    fn final_dense_matches_class_count() {
        for c in [23, 4] {
            let spec = build_cnn_senet(c, 16, true).unwrap();
            let n = spec.layers.len();
            assert_eq!(spec.layers[n - 2], LayerSpec::Dense { units: c });
            assert_eq!(spec.layers[n - 1], LayerSpec::Softmax);
        }
        assert!(build_cnn_senet(1, 16, true).is_err());
    }

    #[test]
    fn no_se_variant_drops_only_se_layers() {
        let with = build_cnn_senet(4, 16, true).unwrap();
        let without = build_cnn_senet(4, 16, false).unwrap();
        assert_eq!(with.layers.len(), without.layers.len() + 5);
        assert!(!without.layers.iter().any(|l| matches!(l, LayerSpec::SeBlock { .. })));
    }

    #[test]
    fn darknet53_grids_at_608() {
        let spec = build_detector_backbone(DetectorPreset::Darknet53).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        let grids: Vec<(usize, usize)> = spec.detect_heads().iter().map(|&i| (shapes[i][1], shapes[i][2])).collect();
        assert_eq!(grids, vec![(19, 19), (38, 38), (76, 76)]);
        let convs = spec.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count();
        // 52 trunk convolutions plus three head convolutions.
        assert_eq!(convs, 55);
    }

    #[test]
    fn tiny_grid_at_128() {
        let spec = build_detector_backbone(DetectorPreset::Tiny).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        let head = spec.detect_heads()[0];
        assert_eq!(shapes[head], vec![18, 8, 8]);
        let convs = spec.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count();
        assert!(convs <= 8);
    }
}
