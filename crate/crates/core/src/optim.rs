//! AdamW with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::tensor::{Matrix, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one parameter array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One update of `theta` in place. `step` is the 1-based step count used
/// for bias correction.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], moments: &mut Moments, step: u64, cfg: &AdamWConfig) -> Result<()> {
    if theta.len() != grad.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw",
            left: (theta.len(), 1),
            right: (grad.len(), 1),
        });
    }
    if moments.m.is_empty() {
        moments.m = vec![0.0; theta.len()];
        moments.v = vec![0.0; theta.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut moments.m).zip(&mut moments.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let moments = self.state.entry(name.clone()).or_default();
            adamw_update(p.data_mut(), g.data(), moments, self.step, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut theta = vec![0.5, -2.0];
        let mut mo = Moments::default();
        for s in 1..=3 {
            adamw_update(&mut theta, &[0.0, 0.0], &mut mo, s, &cfg).unwrap();
        }
        assert_eq!(theta, vec![0.5, -2.0]);
    }

    #[test]
    fn zero_gradient_decays_multiplicatively() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut theta = vec![2.0];
        adamw_update(&mut theta, &[0.0], &mut Moments::default(), 1, &cfg).unwrap();
        assert!((theta[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_error() {
        let mut theta = vec![1.0, 2.0];
        assert!(adamw_update(&mut theta, &[1.0], &mut Moments::default(), 1, &AdamWConfig::default()).is_err());
    }
}
