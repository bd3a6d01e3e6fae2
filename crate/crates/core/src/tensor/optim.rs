//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Array, Scalar};
use crate::error::{Error, Result};

/// Hyperparameters of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every parameter that has a gradient.
    ///
    /// Weight decay is applied to the parameter directly (`θ ← θ − lr·wd·θ`)
    /// before the bias-corrected moment step.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Array<T>>,
        grads: &BTreeMap<String, Array<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if let Some(st) = self.moments.get(name) {
                if st.m.len() != p.len() {
                    return Err(Error::shape("adamw(state)", p.shape(), &[st.m.len()]));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * c.weight_decay);
        let eps = T::from_f64(c.eps);

        for (name, g) in grads {
            let p = params.remove(name).expect("checked above");
            let shape = p.shape().to_vec();
            let mut theta = p.into_vec();
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); theta.len()],
                v: vec![T::zero(); theta.len()],
            });
            for (i, &gi) in g.data().iter().enumerate() {
                st.m[i] = b1 * st.m[i] + one_b1 * gi;
                st.v[i] = b2 * st.v[i] + one_b2 * gi * gi;
                let m_hat = st.m[i] * inv_bc1;
                let v_hat = st.v[i] * inv_bc2;
                let t = theta[i];
                theta[i] = t - decay * t - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            params.insert(name.clone(), Array::new(&shape, theta)?);
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if self.total_steps <= self.warmup_steps {
            return Err(Error::Config(format!(
                "schedule needs total_steps ({}) > warmup_steps ({})",
                self.total_steps, self.warmup_steps
            )));
        }
        if step > self.total_steps {
            return Err(Error::Invalid(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(theta: f64, g: f64) -> (BTreeMap<String, Array<f64>>, BTreeMap<String, Array<f64>>) {
        let p = BTreeMap::from([("w".to_string(), Array::scalar(theta))]);
        let g = BTreeMap::from([("w".to_string(), Array::scalar(g))]);
        (p, g)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, g) = single(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &g, 0.1).unwrap();
        // m̂ = v̂ = 1 → θ − 0.1·1/(1 + 1e-8)
        assert_abs_diff_eq!(p["w"].item(), 1.0 - 0.1 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(p["w"].item(), 0.9, epsilon = 1e-8);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut p, g) = single(0.37, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p["w"].item(), 0.37);
    }

    #[test]
    fn decoupled_decay() {
        let (mut p, g) = single(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_abs_diff_eq!(p["w"].item(), 2.0 * (1.0 - 0.005), epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = BTreeMap::from([("w".to_string(), Array::<f64>::zeros(&[2]))]);
        let g = BTreeMap::from([("w".to_string(), Array::<f64>::zeros(&[3]))]);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut p, &g, 0.1).is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_landmarks() {
        let s = LrSchedule {
            peak_lr: 4e-4,
            warmup_steps: 100,
            total_steps: 1100,
            min_lr: 1e-5,
        };
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), 4e-4);
        assert_abs_diff_eq!(s.lr_at(1100).unwrap(), 1e-5, epsilon = 1e-18);
        assert_abs_diff_eq!(s.lr_at(600).unwrap(), (4e-4 + 1e-5) / 2.0, epsilon = 1e-18);
        assert!(s.lr_at(1101).is_err());
        let mut prev = f64::INFINITY;
        for step in 100..=1100 {
            let lr = s.lr_at(step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
