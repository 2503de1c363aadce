//! Adam with bias correction.

use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(ParamId, Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        let moments = model
            .params()
            .map(|(id, p)| (id, Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam step to every parameter of `model`.
pub fn adam_update(model: &mut Model, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    // Validate first so a missing gradient leaves the model untouched.
    for (id, m, _) in &state.moments {
        let g = grads
            .param(*id)
            .ok_or(Error::MissingGrad { position: id.layer, slot: id.slot.name() })?;
        g.check_same_shape(m)?;
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (id, m, v) in state.moments.iter_mut() {
        let g = grads.param(*id).expect("checked above");
        let p = model
            .param_mut(*id)
            .ok_or(Error::MissingGrad { position: id.layer, slot: id.slot.name() })?;
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::{LayerKind, LayerSpec};

    fn tiny() -> Model {
        let layer = LayerSpec::with_params(
            LayerKind::Linear { out_features: 1 },
            Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
            Tensor::new(vec![1], vec![-0.25]).unwrap(),
        );
        Model::from_layers(vec![1], vec![layer]).unwrap()
    }

    /// Gradients of `c * sum(logits)` for a fixed input of ones.
    fn grads_scaled(model: &Model, c: f64) -> Gradients {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1], 1.0), false);
        let (y, _) = model.forward_on(&mut tape, x, true).unwrap();
        let s = tape.sum(y).unwrap();
        let s = tape.scale(s, c).unwrap();
        tape.backward(s).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut model = tiny();
        let before = model.clone();
        let mut state = OptimizerState::new(&model, AdamConfig::default());
        let g = grads_scaled(&model, 0.0);
        adam_update(&mut model, &g, &mut state).unwrap();
        assert_eq!(model, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut model = tiny();
        let mut state = OptimizerState::new(&model, AdamConfig::default());
        let g = grads_scaled(&model, 1.0);
        adam_update(&mut model, &g, &mut state).unwrap();
        let w = model.layers()[0].weight.as_ref().unwrap().data()[0];
        // bias-corrected first step: m_hat = g, v_hat = g^2
        let expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut model = tiny();
        let mut state = OptimizerState::new(&model, AdamConfig::default());
        for _ in 0..50 {
            let g = grads_scaled(&model, -2.0);
            adam_update(&mut model, &g, &mut state).unwrap();
        }
        assert!(model.layers()[0].weight.as_ref().unwrap().data()[0] > 0.5);
        assert_eq!(state.step(), 50);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut model = tiny();
        let mut state = OptimizerState::new(&model, AdamConfig::default());
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1], 1.0), true);
        let (y, _) = model.forward_on(&mut tape, x, false).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        drop(tape);
        assert!(matches!(adam_update(&mut model, &g, &mut state), Err(Error::MissingGrad { .. })));
        assert_eq!(state.step(), 0);
    }
}
