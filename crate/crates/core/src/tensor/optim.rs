use super::{Element, Tensor};
use crate::error::{config, contract, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config(format!(
                "Adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(config("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    /// Generator/discriminator defaults.
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Bias-corrected Adam over a named parameter set.
///
/// Moments are created lazily the first time a parameter receives a
/// gradient. Parameters without a gradient are left untouched and their
/// step counter does not advance.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, state: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    pub fn step<T: Element>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| contract(format!("gradient for unknown parameter {}", name)))?;
            self.step_one(name, p, g)?;
        }
        Ok(())
    }

    /// Updates a single named parameter.
    pub fn step_one<T: Element>(&mut self, name: &str, p: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        if p.shape() != g.shape() {
            return Err(contract(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                name,
                p.shape()
            )));
        }
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - beta1.powi(st.step as i32);
        let bc2 = 1.0 - beta2.powi(st.step as i32);
        for (((w, &gi), m), v) in
            p.data_mut().iter_mut().zip(g.data()).zip(st.m.iter_mut()).zip(st.v.iter_mut())
        {
            let gi = gi.as_f64();
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *w = T::from_f64(w.as_f64() - update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::new(AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 }).unwrap();
        let mut p = scalar_params(1.5);
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p["w"].item(), 1.5);
    }

    #[test]
    fn hand_computed_recurrence() {
        // g = 1 every step: m_t = 1 - b1^t, v_t = 1 - b2^t, so each
        // bias-corrected update is lr / (1 + eps).
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut opt = Adam::new(cfg).unwrap();
        let mut p = scalar_params(0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        let mut prev = 0.0;
        for _ in 0..3 {
            opt.step(&mut p, &g).unwrap();
            let delta = p["w"].item() - prev;
            assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "delta {}", delta);
            prev = p["w"].item();
        }
    }

    #[test]
    fn absent_parameter_is_bit_identical() {
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar_params(0.25);
        p.insert("frozen".into(), Tensor::from_fn(&[3], |i| i as f64 * 0.1 + 1e-3));
        let before = p["frozen"].clone();
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(0.3))]);
        for _ in 0..1000 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p["frozen"], before);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        assert!(matches!(Adam::new(cfg), Err(crate::Error::Config(_))));
    }
}
