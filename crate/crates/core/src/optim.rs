//! Bias-corrected Adam over a [`ParamSet`].

use thiserror::Error;

use crate::params::{GradBuffer, ParamSet};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in array {index} (`{name}`)")]
    NonFiniteGrad { index: usize, name: String },
    #[error("gradient arrays ({grads}) do not match parameter arrays ({params})")]
    Mismatch { params: usize, grads: usize },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
}

/// Optimizer moments and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            m: params.iter().map(|e| vec![0.0; e.values.len()]).collect(),
            v: params.iter().map(|e| vec![0.0; e.values.len()]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Faults on non-finite gradients before touching any
/// parameter or moment.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradBuffer,
    state: &mut AdamState,
) -> Result<(), OptimError> {
    if !(state.lr > 0.0) {
        return Err(OptimError::BadLearningRate(state.lr));
    }
    if grads.len() != params.len() {
        return Err(OptimError::Mismatch { params: params.len(), grads: grads.len() });
    }
    for idx in 0..params.len() {
        if grads.array(idx).iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGrad { index: idx, name: params.entry(idx).name.clone() });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for idx in 0..params.len() {
        let g = grads.array(idx);
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let w = &mut params.entry_mut(idx).values;
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", 1, 1, vec![value]).unwrap();
        p
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = one_param(1.5);
        let g = GradBuffer::zeros_like(&p);
        let mut s = AdamState::new(&p, 0.1);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p.entry(0).values[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // bias correction makes m_hat = g and v_hat = g^2 on step one,
        // so the update is lr * g / (|g| + eps) ~ lr * sign(g)
        for g0 in [2.5f64, -0.03] {
            let mut p = one_param(0.0);
            let mut g = GradBuffer::zeros_like(&p);
            g.array_mut(0)[0] = g0;
            let mut s = AdamState::new(&p, 0.01);
            adam_step(&mut p, &g, &mut s).unwrap();
            let expected = -0.01 * g0 / (g0.abs() + s.eps);
            assert!((p.entry(0).values[0] - expected).abs() < 1e-15);
            assert!((p.entry(0).values[0] + 0.01 * g0.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_bowl_descends_monotonically() {
        // small enough steps that Adam stays in the descent regime for all
        // 100 iterations instead of oscillating around the minimum
        let mut p = one_param(1.0);
        let mut s = AdamState::new(&p, 0.004);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = p.entry(0).values[0];
            losses.push(w * w);
            let mut g = GradBuffer::zeros_like(&p);
            g.array_mut(0)[0] = 2.0 * w;
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        for pair in losses.windows(2) {
            assert!(pair[1] < pair[0], "loss rose: {pair:?}");
        }
    }

    #[test]
    fn non_finite_grad_faults_before_mutation() {
        let mut p = one_param(1.0);
        let mut g = GradBuffer::zeros_like(&p);
        g.array_mut(0)[0] = f64::NAN;
        let mut s = AdamState::new(&p, 0.1);
        assert!(adam_step(&mut p, &g, &mut s).is_err());
        assert_eq!(p.entry(0).values[0], 1.0);
        assert_eq!(s.step_count(), 0);
    }
}
