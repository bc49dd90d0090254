//! Meta-training engines: the disentangled multi-context learner (DMCM) and the
//! MAML, CAVIA and ANIL baselines, plus test-time adaptation and zero-shot
//! composition of context vectors.

mod baselines;
mod dmcm;
mod inner;
mod optim;
mod sampler;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use baselines::{baseline_meta_step, BatchTask};
pub use dmcm::{dmcm_meta_step, BufferEntry, ChainState, LoadRecord, RecombinationBuffer};
pub use inner::{adapt_test, adapt_weights, compose_zero_shot, inner_adapt, InnerResult};
pub use optim::{Optimizer, OptimizerState};
pub use sampler::{FactorGroups, TaskSampler, TaskSource};
pub use trainer::{Adapted, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Maml,
    Anil,
    Cavia,
    Dmcm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Maml => "maml",
            Method::Anil => "anil",
            Method::Cavia => "cavia",
            Method::Dmcm => "dmcm",
        }
    }

    pub fn uses_contexts(self) -> bool {
        matches!(self, Method::Cavia | Method::Dmcm)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maml" => Ok(Method::Maml),
            "anil" => Ok(Method::Anil),
            "cavia" => Ok(Method::Cavia),
            "dmcm" => Ok(Method::Dmcm),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Whether outer gradients flow through the inner-loop updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradOrder {
    /// Inner gradients are treated as constants.
    First,
    #[default]
    Second,
}

impl std::str::FromStr for GradOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(GradOrder::First),
            "second" => Ok(GradOrder::Second),
            other => Err(Error::config("grad_order", format!("expected first|second, got `{other}`"))),
        }
    }
}

/// Training recipe shared by every method. Fields that only concern DMCM
/// (warm-up, recombination, sweeps) are ignored by the baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner learning rate α.
    pub inner_lr: f64,
    /// Per-step multiplicative decay of α inside one adaptation call.
    #[serde(default = "one")]
    pub inner_decay: f64,
    /// Meta learning rate β.
    pub meta_lr: f64,
    pub inner_steps: usize,
    /// Tasks per meta-update (N). For DMCM this is the full chain, warm-up included.
    pub tasks_per_step: usize,
    /// Warm-up tasks (B) whose losses do not enter the meta-gradient.
    #[serde(default)]
    pub warmup: usize,
    /// Sequential sweeps over all contexts at test time (S_adapt).
    #[serde(default = "one_usize")]
    pub adapt_sweeps: usize,
    pub shots: usize,
    #[serde(default)]
    pub recombination: bool,
    #[serde(default)]
    pub grad_order: GradOrder,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Probability that a chain task changes a factor other than the one
    /// whose context is adapted.
    #[serde(default)]
    pub mislabel_rate: f64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, path: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(path, format!("must be positive, got {v}")))
            }
        };
        pos(self.inner_lr, "train.inner_lr")?;
        pos(self.meta_lr, "train.meta_lr")?;
        if !(self.inner_decay > 0.0 && self.inner_decay <= 1.0) {
            return Err(Error::config(
                "train.inner_decay",
                format!("must lie in (0, 1], got {}", self.inner_decay),
            ));
        }
        if self.tasks_per_step == 0 {
            return Err(Error::config("train.tasks_per_step", "must be at least 1"));
        }
        if self.warmup >= self.tasks_per_step {
            return Err(Error::config(
                "train.warmup",
                format!(
                    "warm-up {} must be smaller than tasks per step {}",
                    self.warmup, self.tasks_per_step
                ),
            ));
        }
        if self.shots == 0 {
            return Err(Error::config("train.shots", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mislabel_rate) {
            return Err(Error::config("train.mislabel_rate", "must lie in [0, 1]"));
        }
        self.optimizer.validate()
    }

    /// α·decay^t for inner step `t`.
    pub fn inner_rate(&self, t: usize) -> f64 {
        self.inner_lr * self.inner_decay.powi(t as i32)
    }
}

/// Summary of one meta-update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub basic_loss: f64,
    pub recombination_loss: f64,
    /// Training loss before the last inner step of each scored task, in chain order.
    pub inner_losses: Vec<f64>,
    pub grad_norm: f64,
    /// Tasks whose recombination term was skipped because the buffer was underfilled.
    pub recombination_skipped: usize,
    pub recombination_used: usize,
    /// Which stored vectors were loaded for each recombination term.
    pub loads: Vec<LoadRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn base() -> TrainConfig {
        TrainConfig {
            inner_lr: 0.1,
            inner_decay: 1.0,
            meta_lr: 0.001,
            inner_steps: 10,
            tasks_per_step: 35,
            warmup: 10,
            adapt_sweeps: 10,
            shots: 10,
            recombination: false,
            grad_order: GradOrder::Second,
            optimizer: Optimizer::Sgd,
            mislabel_rate: 0.0,
        }
    }

    #[test]
    fn validation() {
        assert!(base().validate().is_ok());
        let bad = [
            TrainConfig { warmup: 35, ..base() },
            TrainConfig { inner_lr: 0.0, ..base() },
            TrainConfig { meta_lr: -1.0, ..base() },
            TrainConfig { inner_decay: 0.0, ..base() },
            TrainConfig { inner_decay: 1.2, ..base() },
            TrainConfig { shots: 0, ..base() },
            TrainConfig { mislabel_rate: 2.0, ..base() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })), "{cfg:?}");
        }
    }

    #[test]
    fn decayed_rate() {
        let cfg = TrainConfig { inner_decay: 0.92, ..base() };
        assert_eq!(cfg.inner_rate(0), 0.1);
        assert!((cfg.inner_rate(2) - 0.1 * 0.92 * 0.92).abs() < 1e-15);
    }
}
