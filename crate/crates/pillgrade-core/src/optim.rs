//! AdamW with decoupled weight decay plus the cosine learning-rate
//! schedule used by the training loops.

use std::collections::BTreeMap;

use crate::autograd::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(numel: usize) -> Self {
        Self {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }
}

/// One AdamW update on a single parameter buffer. Weight decay is
/// decoupled: it scales the parameter directly instead of entering the
/// moment estimates.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            left: param.len(),
            right: grad.len(),
        });
    }
    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..param.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grad[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * param[i]);
    }
    Ok(())
}

/// Cosine schedule from `base_lr` at step 0 down to `min_lr` at
/// `total_steps`; monotone non-increasing.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + phase.cos()))
}

/// AdamW over a whole [`ParamSet`], holding one moment state per name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    states: BTreeMap<String, AdamState>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Optimizer {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            states: BTreeMap::new(),
            // beta2 = 0.95 tracks curvature faster at transformer scale
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(tensor.numel()));
            adamw_step(
                tensor.data_mut(),
                grad,
                state,
                lr,
                self.betas,
                self.eps,
                self.weight_decay,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_zero_decay_is_fixed_point() {
        let mut p = vec![0.5, -0.25];
        let g = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &g, &mut s, 1e-3, (0.9, 0.999), 1e-8, 0.0).unwrap();
        assert_eq!(p, vec![0.5, -0.25]);
    }

    #[test]
    fn scalar_hand_evaluated_step() {
        // one step: m = 0.1*g, v = 0.001*g^2, m_hat = g, v_hat = g^2,
        // update = lr * g / (|g| + eps)
        let mut p = vec![1.0];
        let g = vec![0.4];
        let mut s = AdamState::new(1);
        let lr = 1e-4;
        adamw_step(&mut p, &g, &mut s, lr, (0.9, 0.999), 1e-8, 0.0).unwrap();
        let expect = 1.0 - lr * 0.4 / (0.4 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_param() {
        let mut p = vec![2.0];
        let g = vec![0.0];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &g, &mut s, 0.1, (0.9, 0.999), 1e-8, 0.5).unwrap();
        // pure decay: p -= lr * wd * p
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6).unwrap(), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-20);
        let mid = cosine_lr(50, 100, 1e-4, 1e-6).unwrap();
        assert!((mid - (1e-4 + 1e-6) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=200 {
            let lr = cosine_lr(step, 200, 3e-3, 1e-5).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn cosine_rejects_out_of_range() {
        assert!(matches!(
            cosine_lr(101, 100, 1e-4, 1e-6),
            Err(Error::StepOutOfRange { .. })
        ));
    }
}
