use serde::{Deserialize, Serialize};

use crate::error::{DcaError, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters, excluding the learning rate which follows the
/// trainer's schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with zeroed moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, learning_rate: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            learning_rate,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected Adam update.
    ///
    /// `params` are `(name, tensor)` pairs in the same order the state was
    /// built with. All gradients are validated before any parameter moves,
    /// so a rejected step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DcaError::Contract(format!(
                "adam step: {} params, {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&self.m)) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(DcaError::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(DcaError::Optimizer { param: name.clone() });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let lr = self.learning_rate;
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(param: f64, grad: f64, lr: f64, steps: usize) -> (f64, AdamState) {
        let mut p = Tensor::scalar(param);
        let g = Tensor::scalar(grad);
        let mut state = AdamState::new(AdamConfig::default(), lr, [&p]);
        for _ in 0..steps {
            state.step(&mut [("w".into(), &mut p)], &[&g]).unwrap();
        }
        (p.item(), state)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (p, state) = run(0.37, 0.0, 0.1, 5);
        assert_eq!(p, 0.37);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after one step, so Δ = lr / (1 + ε).
        let (p, _) = run(1.0, 1.0, 0.1, 1);
        assert!((p - 0.9).abs() < 1e-8, "{p}");
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut a = Tensor::vector(vec![0.5, -0.25]);
        let mut b = a.clone();
        let mut state = AdamState::new(AdamConfig::default(), 0.01, [&a, &b]);
        for s in 0..20 {
            let g = Tensor::vector(vec![(s as f64).sin(), 0.3]);
            state
                .step(&mut [("a".into(), &mut a), ("b".into(), &mut b)], &[&g, &g])
                .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn deterministic_bits() {
        let (p1, s1) = run(0.123, -0.7, 0.01, 17);
        let (p2, s2) = run(0.123, -0.7, 0.01, 17);
        assert_eq!(p1.to_bits(), p2.to_bits());
        assert_eq!(s1, s2);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut b = Tensor::vector(vec![3.0]);
        let mut state = AdamState::new(AdamConfig::default(), 0.1, [&w, &b]);
        let gw = Tensor::vector(vec![0.1, 0.2]);
        let gb = Tensor::vector(vec![f64::NAN]);
        let err = state
            .step(&mut [("layer0.weight".into(), &mut w), ("layer0.bias".into(), &mut b)], &[&gw, &gb])
            .unwrap_err();
        assert!(matches!(&err, DcaError::Optimizer { param } if param == "layer0.bias"));
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(state.step, 0);
    }
}
