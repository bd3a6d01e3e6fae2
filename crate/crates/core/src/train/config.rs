use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::optim::{AdamWConfig, LrSchedule};

/// One resolution stage of the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub resolution: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub curriculum: Vec<Phase>,
    /// Context counts drawn uniformly per scene and step.
    pub context_views: Vec<usize>,
    pub skip_min: usize,
    pub skip_max: usize,
    pub target_views: usize,
    #[serde(default = "default_margin")]
    pub target_margin: usize,
    pub batch_scenes: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub min_lr: f64,
    /// Perceptual loss weight.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub seed: u64,
    /// Checkpoint every this many steps; phase ends always checkpoint.
    /// Zero disables interval checkpoints.
    pub checkpoint_interval: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Write measured wall-clock times into the metrics CSV. With `false`
    /// the column holds zeros and the file is reproducible byte for byte.
    #[serde(default = "default_true")]
    pub log_wallclock: bool,
}

fn default_margin() -> usize {
    2
}

fn default_lambda() -> f64 {
    0.2
}

fn default_clip() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            curriculum: vec![Phase { resolution: 32, steps: 200 }, Phase { resolution: 48, steps: 200 }],
            context_views: vec![2, 4],
            skip_min: 1,
            skip_max: 8,
            target_views: 2,
            target_margin: default_margin(),
            batch_scenes: 1,
            peak_lr: 1e-3,
            warmup: 50,
            min_lr: 1e-5,
            lambda: default_lambda(),
            seed: 0,
            checkpoint_interval: 0,
            grad_clip: default_clip(),
            adamw: AdamWConfig::default(),
            log_wallclock: true,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.curriculum.iter().map(|p| p.steps).sum()
    }

    /// Phase index of 0-based step `step`.
    pub fn phase_of(&self, step: u64) -> Option<usize> {
        let mut end = 0;
        for (i, p) in self.curriculum.iter().enumerate() {
            end += p.steps;
            if step < end {
                return Some(i);
            }
        }
        None
    }

    /// Cumulative step counts at which each phase ends.
    pub fn phase_ends(&self) -> Vec<u64> {
        self.curriculum
            .iter()
            .scan(0, |acc, p| {
                *acc += p.steps;
                Some(*acc)
            })
            .collect()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup,
            total_steps: self.total_steps(),
            min_lr: self.min_lr,
        }
    }

    /// Learning rate of 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.schedule().lr_at(step + 1)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.curriculum.is_empty() {
            return bad("curriculum is empty".into());
        }
        let q = model.q();
        for p in &self.curriculum {
            if p.steps == 0 {
                return bad(format!("phase at resolution {} has zero steps", p.resolution));
            }
            if p.resolution == 0 || p.resolution % q != 0 {
                return bad(format!("resolution {} is not a positive multiple of q={q}", p.resolution));
            }
        }
        if self.context_views.is_empty() || self.context_views.contains(&0) {
            return bad("context_views must list positive counts".into());
        }
        if self.skip_min == 0 || self.skip_min > self.skip_max {
            return bad(format!("bad skip range [{}, {}]", self.skip_min, self.skip_max));
        }
        if self.target_views == 0 || self.batch_scenes == 0 {
            return bad("target_views and batch_scenes must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad(format!("bad learning rates peak {} min {}", self.peak_lr, self.min_lr));
        }
        if self.warmup >= self.total_steps() {
            return bad(format!("warmup {} must be shorter than {} total steps", self.warmup, self.total_steps()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(steps: &[u64]) -> TrainConfig {
        TrainConfig {
            curriculum: steps.iter().map(|&s| Phase { resolution: 16, steps: s }).collect(),
            warmup: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn phases_split_at_cumulative_steps() {
        let c = cfg(&[3, 5, 2]);
        assert_eq!(c.total_steps(), 10);
        assert_eq!(c.phase_ends(), vec![3, 8, 10]);
        let phases: Vec<_> = (0..11).map(|s| c.phase_of(s)).collect();
        assert_eq!(
            phases,
            [0, 0, 0, 1, 1, 1, 1, 1, 2, 2].map(Some).into_iter().chain([None]).collect::<Vec<_>>()
        );
    }

    #[test]
    fn validation() {
        let m = ModelConfig::new(16, 1, 2, 4, 4);
        cfg(&[3]).validate(&m).unwrap();
        assert!(cfg(&[0]).validate(&m).is_err());
        let mut c = cfg(&[3]);
        c.curriculum[0].resolution = 18;
        assert!(c.validate(&m).is_err());
        let mut c = cfg(&[3]);
        c.lambda = -0.1;
        assert!(c.validate(&m).is_err());
        let mut c = cfg(&[3]);
        c.warmup = 3;
        assert!(c.validate(&m).is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let c = TrainConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("lambda");
        assert_eq!(serde_json::from_value::<TrainConfig>(v.clone()).unwrap().lambda, 0.2);
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
    }

    #[test]
    fn lr_follows_schedule() {
        let c = cfg(&[10]);
        assert_eq!(c.lr_at(0).unwrap(), c.peak_lr);
        assert!((c.lr_at(9).unwrap() - c.min_lr).abs() < 1e-12);
    }
}
