use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators shaped like the parameter tensors they update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { config, step: 0, m, v }
    }
}

/// One bias-corrected Adam update. Gradients are checked for non-finite
/// values before anything is modified.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameter tensors, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (ti, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[ti].len() {
            return Err(Error::Shape(format!("adam: tensor {ti} shape mismatch")));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!(
                "adam: non-finite gradient {} at tensor {ti}, element {i}",
                g[i]
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (ti, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[ti], &mut state.v[ti]);
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(AdamConfig::default(), [3]);
        adam_step(&mut [&mut p], &[&[0.0; 3]], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_along_sign() {
        let mut p = vec![0.0; 4];
        let g = [3.0, -0.01, 250.0, -7.0];
        let mut st = AdamState::new(AdamConfig::default(), [4]);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        for (d, gi) in p.iter().zip(g) {
            assert!(d.abs() <= 0.0008 * (1.0 + 1e-6));
            assert!(d.abs() >= 0.0008 * (1.0 - 1e-5));
            assert_eq!(d.signum(), -gi.signum());
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = vec![5.0];
        let mut st = AdamState::new(AdamConfig::default(), [1]);
        let mut prev = p[0];
        for _ in 0..500 {
            adam_step(&mut [&mut p], &[&[0.5]], &mut st).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
        // A constant gradient gives m̂/√v̂ = 1 at every step.
        assert!((p[0] - (5.0 - 500.0 * 0.0008)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut a = vec![1.0, 2.0];
        let mut b = vec![3.0];
        let mut st = AdamState::new(AdamConfig::default(), [2, 1]);
        let err = adam_step(&mut [&mut a, &mut b], &[&[0.1, 0.2], &[f64::NAN]], &mut st).unwrap_err();
        assert!(err.to_string().contains("tensor 1"), "{err}");
        assert_eq!(a, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }
}
