//! AdamW: Adam with bias-corrected moments and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state for a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    names: Vec<String>,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Self> {
        config.validate()?;
        let (names, sizes): (Vec<String>, Vec<usize>) =
            params.into_iter().map(|(n, t)| (n.to_owned(), t.numel())).unzip();
        Ok(Self {
            config,
            names,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update using each tensor's accumulated gradient; a missing
    /// gradient counts as zero. Any non-finite gradient aborts before a single
    /// value is changed.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, step received {}",
                self.names.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::shape("adamw", p.shape(), &[self.m[i].len()]));
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        param: self.names[i].clone(),
                        step: self.step + 1,
                    });
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.take_grad();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: 0.01,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_unchanged() {
        let mut w = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let before = w.clone();
        let mut opt = AdamW::new(cfg(0.0), [("w", &w)]).unwrap();
        for _ in 0..5 {
            w.accumulate_grad(&[0.0; 3]).unwrap();
            opt.step(&mut [&mut w]).unwrap();
        }
        assert_eq!(w.data(), before.data());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after bias correction, so |Δ| = lr·|g|/(|g| + eps).
        let g = [0.5, -3.0, 1e-3];
        let mut w = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let mut opt = AdamW::new(cfg(0.0), [("w", &w)]).unwrap();
        w.accumulate_grad(&g).unwrap();
        opt.step(&mut [&mut w]).unwrap();
        for (x, gi) in w.data().iter().zip(g) {
            let expect = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
            assert!(((1.0 - x).abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let mut w = Tensor::vector(vec![2.0]).unwrap();
        let mut opt = AdamW::new(cfg(0.1), [("w", &w)]).unwrap();
        opt.step(&mut [&mut w]).unwrap();
        assert!((w.data()[0] - (2.0 - 0.01 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut w = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut opt = AdamW::new(cfg(0.0), [("w1", &w)]).unwrap();
        w.accumulate_grad(&[f64::NAN, 0.0]).unwrap();
        let err = opt.step(&mut [&mut w]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref param, step: 1 } if param == "w1"));
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut w = Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap();
            let mut opt = AdamW::new(cfg(0.01), [("w", &w)]).unwrap();
            for s in 0..20 {
                let g: Vec<f64> = w.data().iter().map(|x| (x * 7.0 + s as f64).sin()).collect();
                w.accumulate_grad(&g).unwrap();
                opt.step(&mut [&mut w]).unwrap();
            }
            w.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let w = Tensor::scalar(0.0);
        let bad = AdamWConfig {
            learning_rate: 0.0,
            ..AdamWConfig::default()
        };
        assert!(matches!(AdamW::new(bad, [("w", &w)]), Err(Error::Config(_))));
    }
}
