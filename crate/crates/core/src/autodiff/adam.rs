//! Adam optimizer with the reference bias-corrected update.
//!
//! Weight decay is coupled: it is added to the gradient before the moment
//! updates, matching the original formulation rather than AdamW. All
//! parameters step together, so a single shared step counter is equivalent
//! to per-parameter counters.

use std::collections::BTreeMap;

use crate::checkpoint::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates, keyed by parameter name.
pub struct AdamState {
    config: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// First-moment buffer for a parameter, if it has ever been stepped.
    pub fn moment_m(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(|v| v.as_slice())
    }

    /// Second-moment buffer for a parameter, if it has ever been stepped.
    pub fn moment_v(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(|v| v.as_slice())
    }

    /// Apply one update. Parameters absent from `grads` are treated as having
    /// zero gradient; their moments still decay.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            if !params.contains(name) {
                return Err(Error::Config(format!("gradient for unknown parameter {name}")));
            }
            if !grad.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        for name in params.names() {
            let param = params.get_mut(&name).unwrap();
            if let Some(grad) = grads.get(&name) {
                if grad.shape() != param.shape() {
                    return Err(Error::Shape(format!(
                        "gradient shape {:?} vs parameter {:?} for {name}",
                        grad.shape(),
                        param.shape()
                    )));
                }
            }
            let n = param.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let gdata = grads.get(&name).map(|g| g.data());
            let pdata = param.data_mut();
            for i in 0..n {
                let mut g = gdata.map_or(0.0, |g| g[i]);
                if c.weight_decay != 0.0 {
                    g += c.weight_decay * pdata[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pdata[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![value]));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(0.25);
        let mut opt = AdamState::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![0.0]));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.25]);
    }

    #[test]
    fn first_step_matches_reference_value() {
        let mut params = single_param(0.0);
        let mut opt = AdamState::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![1.0]));
        opt.step(&mut params, &grads).unwrap();
        let got = params.get("w").unwrap().data()[0];
        assert!((got - (-9.99999e-5)).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn descends_quadratic_loss() {
        // minimize w^2 from w = 1 with analytic gradient 2w
        let mut params = single_param(1.0);
        let mut opt = AdamState::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        let mut last = 1.0f64;
        for _ in 0..100 {
            let w = params.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::vector(vec![2.0 * w]));
            opt.step(&mut params, &grads).unwrap();
            last = params.get("w").unwrap().data()[0];
        }
        assert!(last.abs() < 0.5, "loss failed to descend, w = {last}");
    }

    #[test]
    fn coupled_weight_decay_shrinks_params() {
        let mut plain = single_param(1.0);
        let mut decayed = single_param(1.0);
        let mut opt_plain = AdamState::new(AdamConfig::default());
        let mut opt_decay = AdamState::new(AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        });
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::vector(vec![0.0]))].into();
        opt_plain.step(&mut plain, &grads).unwrap();
        opt_decay.step(&mut decayed, &grads).unwrap();
        assert_eq!(plain.get("w").unwrap().data(), &[1.0]);
        assert!(decayed.get("w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn rejects_nan_gradient() {
        let mut params = single_param(0.0);
        let mut opt = AdamState::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![f64::NAN]));
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(Error::Numeric(_))
        ));
    }
}
