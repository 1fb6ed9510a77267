use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::DEFAULT_LOGIT_SCALE;
use crate::losses::{DEFAULT_LAMBDA_CE, DEFAULT_LAMBDA_COS};
use crate::matching::DEFAULT_IOU_THRESHOLD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Warmup,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    /// every pair above the IoU threshold
    Iou,
    Hungarian,
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_batch")]
    pub batch_scenes: usize,
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Fractions of the total step count at which the rate is multiplied by
    /// `lr_decay`.
    #[serde(default = "default_milestones")]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_threshold")]
    pub iou_threshold: f64,
    #[serde(default = "default_matcher")]
    pub matcher: MatcherKind,
    #[serde(default = "default_lambda_ce")]
    pub lambda_ce: f64,
    #[serde(default = "default_lambda_cos")]
    pub lambda_cos: f64,
    #[serde(default = "default_targets")]
    pub perturb_iou_targets: Vec<f64>,
    /// Probability that each candidate predicted mask enters the batch.
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: f64,
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps_per_epoch() -> usize {
    10
}
fn default_batch() -> usize {
    4
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_milestones() -> Vec<f64> {
    vec![0.9, 0.95]
}
fn default_lr_decay() -> f64 {
    0.1
}
fn default_threshold() -> f64 {
    DEFAULT_IOU_THRESHOLD
}
fn default_matcher() -> MatcherKind {
    MatcherKind::Iou
}
fn default_lambda_ce() -> f64 {
    DEFAULT_LAMBDA_CE
}
fn default_lambda_cos() -> f64 {
    DEFAULT_LAMBDA_COS
}
fn default_targets() -> Vec<f64> {
    vec![0.7, 0.8, 0.9]
}
fn default_mix_ratio() -> f64 {
    1.0
}
fn default_logit_scale() -> f64 {
    DEFAULT_LOGIT_SCALE
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

impl TrainConfig {
    /// Desk-scale warmup: 20 epochs of 10 steps.
    pub fn warmup() -> Self {
        Self {
            stage: TrainStage::Warmup,
            epochs: 20,
            steps_per_epoch: default_steps_per_epoch(),
            batch_scenes: default_batch(),
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: default_weight_decay(),
            lr_milestones: default_milestones(),
            lr_decay: default_lr_decay(),
            iou_threshold: default_threshold(),
            matcher: default_matcher(),
            lambda_ce: default_lambda_ce(),
            lambda_cos: default_lambda_cos(),
            perturb_iou_targets: default_targets(),
            mix_ratio: default_mix_ratio(),
            logit_scale: default_logit_scale(),
            seed: 0,
        }
    }

    /// Desk-scale mixed-mask stage: 10 epochs of 10 steps.
    pub fn mixed() -> Self {
        Self {
            stage: TrainStage::Mixed,
            epochs: 10,
            ..Self::warmup()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Learning rate at `step` under the multi-step schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps() as f64;
        let passed = self.lr_milestones.iter().filter(|&&m| step as f64 >= m * total).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_scenes == 0 {
            return fail("epochs, steps_per_epoch and batch_scenes must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be nonnegative".into());
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return fail("lr_milestones are fractions in [0, 1]".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]".into());
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return fail(format!("iou_threshold {} outside (0, 1]", self.iou_threshold));
        }
        if !(self.lambda_ce >= 0.0 && self.lambda_cos >= 0.0) {
            return fail("loss weights must be nonnegative".into());
        }
        if self.perturb_iou_targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return fail("perturb_iou_targets must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return fail("mix_ratio must lie in [0, 1]".into());
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return fail("logit_scale must be positive".into());
        }
        Ok(())
    }
}

/// Exponents of the seen/unseen geometric ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub alpha: f64,
    pub beta: f64,
    pub seen_flags: Vec<bool>,
}

impl EnsembleConfig {
    pub fn new(alpha: f64, beta: f64, seen_flags: Vec<bool>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!(
                "ensemble exponents must lie in [0, 1], got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            seen_flags,
        })
    }
}
