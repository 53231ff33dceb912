use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            lr: 3e-4,
            warmup_steps: 400,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || -> BTreeMap<String, Vec<f64>> {
            params
                .iter()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Learning rate for update number `step` (1-based): linear warmup, then flat.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.config.warmup_steps;
        if warm == 0 {
            self.config.lr
        } else {
            self.config.lr * (step as f64 / warm as f64).min(1.0)
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != t.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: param {:?}, grad {:?}", t.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.lr_at(state.step);
    let AdamConfig {
        beta1, beta2, eps, ..
    } = state.config;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads[&name].data();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let p = params.get(&name).unwrap();
        let mut updated = p.to_vec();
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            updated[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        params.set(&name, Tensor::new(&shape, updated)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = one_param(1.5);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            adam_step(&mut p, &grad(0.0), &mut s).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 1.5);
        assert_eq!(s.first_moment("w").unwrap(), &[0.0]);
        assert_eq!(s.second_moment("w").unwrap(), &[0.0]);
        assert_eq!(s.step(), 3);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1 g, v = 0.02 g², m̂ = g, v̂ = g²; update = -lr₁ · g / (|g| + ε)
        let cfg = AdamConfig::default();
        let mut p = one_param(0.0);
        let mut s = AdamState::new(cfg.clone(), &p);
        let g = 0.25;
        adam_step(&mut p, &grad(g), &mut s).unwrap();
        let lr1 = cfg.lr / cfg.warmup_steps as f64;
        let expected = -lr1 * g / (g + cfg.eps);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-12 * expected.abs());
        assert!((s.first_moment("w").unwrap()[0] - 0.1 * g).abs() < 1e-15);
        assert!((s.second_moment("w").unwrap()[0] - 0.02 * g * g).abs() < 1e-15);
    }

    #[test]
    fn two_steps_follow_the_moment_recurrence() {
        let cfg = AdamConfig::default();
        let mut p = one_param(1.0);
        let mut s = AdamState::new(cfg.clone(), &p);
        let g = -0.5;
        adam_step(&mut p, &grad(g), &mut s).unwrap();
        adam_step(&mut p, &grad(g), &mut s).unwrap();
        assert_eq!(s.step(), 2);
        let m2 = 0.9 * (0.1 * g) + 0.1 * g;
        let v2 = 0.98 * (0.02 * g * g) + 0.02 * g * g;
        assert!((s.first_moment("w").unwrap()[0] - m2).abs() < 1e-16);
        assert!((s.second_moment("w").unwrap()[0] - v2).abs() < 1e-16);
        // With a constant gradient the bias-corrected ratio stays g/|g|.
        let lr = |t: f64| cfg.lr * t / cfg.warmup_steps as f64;
        let step = |t: f64| {
            let m_hat = (1.0 - 0.9f64.powf(t)) * g / (1.0 - 0.9f64.powf(t));
            let v_hat = (1.0 - 0.98f64.powf(t)) * g * g / (1.0 - 0.98f64.powf(t));
            lr(t) * m_hat / (v_hat.sqrt() + cfg.eps)
        };
        let expected = 1.0 - step(1.0) - step(2.0);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = one_param(0.0);
        p.insert("bias", Tensor::zeros(&[2]));
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &grad(1.0), &mut s).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn learning_rate_warms_up_linearly() {
        let s = AdamState::new(AdamConfig::default(), &one_param(0.0));
        assert!((s.lr_at(200) - 1.5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(400), 3e-4);
        assert_eq!(s.lr_at(10_000), 3e-4);
    }
}
