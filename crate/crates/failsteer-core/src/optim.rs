//! Bias-corrected Adam.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};

/// Per-parameter-array Adam state plus hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_len: usize, lr: f64) -> CoreResult<Self> {
        if !(lr > 0.0) {
            return Err(CoreError::Config(alloc::format!(
                "adam lr must be positive, got {lr}"
            )));
        }
        Ok(AdamState {
            step: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }
}

/// One Adam update in place. `params` and `grads` must match the state's
/// parameter count.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> CoreResult<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::Shape {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3, 1e-3).unwrap();
        adam_step(&mut p, &[0.0, 0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_approaches_signed_lr_for_large_gradients() {
        // One step from zeroed moments: m_hat = g, v_hat = g^2, so the
        // update is -lr * g / (|g| + eps) ~ -lr * sign(g).
        let lr = 1e-2;
        for &g in &[1e3, -1e4, 5e2] {
            let mut p = vec![0.0];
            let mut st = AdamState::new(1, lr).unwrap();
            adam_step(&mut p, &[g], &mut st).unwrap();
            let expected = -lr * g.signum();
            assert!(
                (p[0] - expected).abs() < 1e-6,
                "g={g}: got {} want {}",
                p[0],
                expected
            );
        }
    }

    #[test]
    fn identical_calls_are_bit_identical() {
        let grads = [0.3, -0.7, 0.01, 2.0];
        let run = || {
            let mut p = vec![1.0, 2.0, 3.0, 4.0];
            let mut st = AdamState::new(4, 1e-3).unwrap();
            for _ in 0..10 {
                adam_step(&mut p, &grads, &mut st).unwrap();
            }
            (p, st)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3, 1e-3).unwrap();
        let err = adam_step(&mut p, &[0.0; 2], &mut st).unwrap_err();
        assert!(matches!(err, CoreError::Shape { .. }));
    }

    #[test]
    fn step_increments_by_one_per_update() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1, 1e-3).unwrap();
        for expect in 1..=5 {
            adam_step(&mut p, &[1.0], &mut st).unwrap();
            assert_eq!(st.step, expect);
        }
    }
}
