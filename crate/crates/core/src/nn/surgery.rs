//! Classifier head replacement for transfer learning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::spec::LayerSpec;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Returns a copy of `source` whose final dense layer maps to
/// `new_class_count` outputs. Every other parameter and running statistic is
/// copied bit-exactly; the new head is re-initialized from `seed`.
pub fn replace_head<T: Element>(source: &Model<T>, new_class_count: usize, seed: u64) -> Result<Model<T>> {
    let spec = source.spec();
    let n = spec.layers.len();
    if n < 2 || !matches!(spec.layers[n - 1], LayerSpec::Softmax) {
        return Err(Error::Structural("network does not end in softmax".into()));
    }
    if !matches!(spec.layers[n - 2], LayerSpec::Dense { .. }) {
        return Err(Error::Structural("network has no dense layer before softmax".into()));
    }
    if new_class_count < 2 {
        return Err(Error::Config(format!(
            "head needs at least 2 classes, got {new_class_count}"
        )));
    }
    let head = n - 2;
    let mut new_spec = spec.clone();
    new_spec.layers[head] = LayerSpec::Dense {
        units: new_class_count,
    };
    new_spec.class_count = new_class_count;

    let head_prefix = format!("{head}.dense.");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(new_spec, |name, shape| {
        if name.starts_with(&head_prefix) {
            if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                let bound = (6.0 / shape[0] as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
            }
        } else {
            source
                .parameter(name)
                .map(|p| p.tensor.clone().with_grad(false))
                .unwrap_or_else(|| Tensor::zeros(shape))
        }
    })?;
    for (dst, src) in model.bn_states_mut().iter_mut().zip(source.bn_states()) {
        dst.clone_from(src);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build::{build_cnn_senet_with, CnnSenetOptions};

    fn small(c: usize) -> Model<f32> {
        let spec = build_cnn_senet_with(&CnnSenetOptions {
            input_size: 72,
            ..CnnSenetOptions::new(c)
        })
        .unwrap();
        Model::new(spec, 11).unwrap()
    }

    #[test]
    fn surgery_changes_only_the_head() {
        let src = small(23);
        let dst = replace_head(&src, 4, 99).unwrap();
        let head = format!("{}.dense.", src.spec().layers.len() - 2);
        for p in dst.parameters() {
            if p.name.starts_with(&head) {
                assert_eq!(p.tensor.shape().last(), Some(&4));
            } else {
                let orig = src.parameter(&p.name).unwrap();
                let a: Vec<u32> = orig.tensor.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "{}", p.name);
            }
        }
        assert_eq!(src.param_count() - dst.param_count(), 4883);
    }

    #[test]
    fn surgery_is_structurally_idempotent() {
        let once = replace_head(&small(23), 4, 1).unwrap();
        let twice = replace_head(&once, 4, 2).unwrap();
        assert_eq!(once.spec(), twice.spec());
        let shapes = |m: &Model<f32>| m.parameters().iter().map(|p| p.tensor.shape().to_vec()).collect::<Vec<_>>();
        assert_eq!(shapes(&once), shapes(&twice));
    }

    #[test]
    fn detector_has_no_classifier_head() {
        let spec = crate::nn::build_detector_backbone(crate::nn::DetectorPreset::Tiny).unwrap();
        let m = Model::<f32>::new(spec, 0).unwrap();
        assert!(matches!(replace_head(&m, 4, 0), Err(Error::Structural(_))));
    }
}
