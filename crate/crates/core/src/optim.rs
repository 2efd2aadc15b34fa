//! Named parameters and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A named tensor owned by a model. Non-trainable entries (e.g. batch-norm
/// running statistics) are skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_grad(true),
            trainable: true,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element = f32> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Applies one update from the gradients stored on each trainable
    /// parameter, then clears them.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        let missing: Vec<String> = params
            .iter()
            .filter(|p| p.trainable && p.tensor.grad().is_none())
            .map(|p| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGrad(missing));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len()
            || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.tensor.numel())
        {
            return Err(Error::Structural(
                "optimizer state does not match the parameter list".into(),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.epsilon);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if !p.trainable {
                continue;
            }
            let g = p.tensor.take_grad().expect("checked above");
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, v: f64, g: Option<f64>) -> Parameter<f64> {
        let mut p = Parameter::new(name, Tensor::scalar(v));
        p.tensor.set_grad(g.map(|g| vec![g])).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![param("w", 0.0, Some(1.0))];
        let mut adam = AdamState::new(0.001);
        adam.step(&mut params).unwrap();
        let w = params[0].tensor.data()[0];
        assert!((w + 0.001).abs() < 1e-10, "{w}");
        assert_eq!(adam.step, 1);
        assert!(params[0].tensor.grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut params = vec![param("w", 0.5, Some(1.0))];
        let mut adam = AdamState::new(0.001);
        adam.step(&mut params).unwrap();
        let after_first = params[0].tensor.data()[0];
        let m_before = adam.first_moment[0][0];
        params[0].tensor.set_grad(Some(vec![0.0])).unwrap();
        // Bias-corrected moments still move the parameter while m decays, so
        // the zero-grad contract is checked on a fresh state.
        let mut fresh = vec![param("w", 0.5, Some(0.0))];
        let mut adam2 = AdamState::new(0.001);
        adam2.step(&mut fresh).unwrap();
        assert_eq!(fresh[0].tensor.data()[0], 0.5);
        adam.step(&mut params).unwrap();
        assert!((adam.first_moment[0][0] - 0.9 * m_before).abs() < 1e-15);
        assert!(params[0].tensor.data()[0] < after_first);
    }

    #[test]
    fn missing_gradients_are_named() {
        let mut params = vec![param("a", 0.0, Some(1.0)), param("b", 0.0, None)];
        let err = AdamState::new(0.001).step(&mut params).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref names) if names == &["b".to_string()]));
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut params = vec![param("a", 0.3, None), param("b", 0.3, None)];
        let mut adam = AdamState::new(0.01);
        for k in 0..25 {
            let g = ((k as f64) * 0.7).sin();
            for p in &mut params {
                p.tensor.set_grad(Some(vec![g])).unwrap();
            }
            adam.step(&mut params).unwrap();
            assert_eq!(params[0].tensor.data(), params[1].tensor.data());
        }
    }
}
