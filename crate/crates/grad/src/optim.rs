use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{GradError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array>,
    pub second: Vec<Array>,
}

impl OptimState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Array>) -> Self {
        let first: Vec<Array> = params
            .into_iter()
            .map(|p| Array::zeros(p.shape()))
            .collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Array],
    grads: &[&[f64]],
    state: &mut OptimState,
) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(GradError::ShapeMismatch {
            what: "optimizer parameter count".into(),
            expected: vec![state.first.len()],
            got: vec![params.len(), grads.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != m.shape() || g.len() != p.len() {
            return Err(GradError::ShapeMismatch {
                what: "optimizer parameter".into(),
                expected: m.shape().to_vec(),
                got: p.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p0: f64, g: f64, cfg: AdamConfig, steps: usize) -> Vec<f64> {
        let mut p = Array::scalar(p0);
        let mut st = OptimState::new(cfg, [&p]);
        let mut trace = vec![];
        for _ in 0..steps {
            let before = p.data()[0];
            adam_step(&mut [&mut p], &[&[g]], &mut st).unwrap();
            trace.push(p.data()[0] - before);
        }
        trace
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let d = run(1.5, 0.0, AdamConfig::default(), 3);
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_hand_value() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = Array::scalar(1.0);
        let mut st = OptimState::new(cfg, [&p]);
        adam_step(&mut [&mut p], &[&[1.0]], &mut st).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction: p' = 1 - 0.1 / (1 + 1e-8)
        assert!((p.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamConfig::default();
        let d = run(0.0, 0.37, cfg, 2000);
        for step in &d {
            assert!(*step < 0.0, "update follows the gradient sign");
        }
        assert!((d.last().unwrap().abs() - cfg.lr).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Array::zeros(&[2]);
        let mut st = OptimState::new(AdamConfig::default(), [&Array::zeros(&[3])]);
        assert!(adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
