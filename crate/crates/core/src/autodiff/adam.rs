use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter, one buffer per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Array>,
    pub second_moment: Vec<Array>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Array::zeros(p.shape()))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient
/// is non-finite or mis-shaped.
pub fn adam_step(params: &mut ParamStore, grads: &[Array], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::InvalidShape {
            shape: vec![params.len()],
            len: grads.len(),
        });
    }
    for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&state.first_moment)) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }

    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let p = p.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Array::scalar(x));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..3 {
            adam_step(&mut p, &[Array::scalar(0.0)], &mut s).unwrap();
        }
        assert_eq!(p.values()[0].item(), 1.5);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = single(0.0);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), &p);
        adam_step(&mut p, &[Array::scalar(1.0)], &mut s).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.values()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_state() {
        let run = || {
            let mut p = single(0.3);
            let mut s = AdamState::new(AdamConfig::default(), &p);
            for k in 0..5 {
                adam_step(&mut p, &[Array::scalar(0.1 * k as f64 - 0.2)], &mut s).unwrap();
            }
            (p, s)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(
            p1.values()[0].item().to_bits(),
            p2.values()[0].item().to_bits()
        );
        assert_eq!(s1, s2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[Array::scalar(f64::NAN)], &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.step, 0);
    }
}
