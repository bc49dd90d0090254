//! End-to-end studies on the sine benchmark: training curves, range-exclusion
//! sweeps, zero-shot recombination, label corruption, context-count and
//! context-size ablations, and timing.

mod presets;
mod runner;
mod studies;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::meta::{Method, TrainConfig, Trainer};
use crate::model::{Architecture, ContextSpec, NetworkConfig};
use crate::tasks::{sample_shots, FactorSpec, RangePartition, SineTask, TaskDataset, TaskFamily};

pub use presets::{a1, a3_zeroshot, b1, b1_maml, b4_param, NContext};
pub use runner::{run_many, run_training_curve, RunSpec, RunState};
pub use studies::{
    final_summary, restrict_amplitude, run_mislabel, run_ncontext, run_ood_sweep,
    run_param_ablation, run_timing, run_zeroshot, timing_configs, zero_shot_errors,
    zero_shot_eval, FinalSummary, MislabelEntry, MislabelReport, NContextReport, OodReport,
    OodSummary, StudyConfig, StudyReport, TimingEntry, ZeroShotModel, ZeroShotReport,
};

/// Which cells of the range grid are withheld from training.
// `None` has braces so that unknown keys next to `kind = "none"` are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Exclusion {
    None {},
    /// This fraction of all cells, rounded, chosen at random per trial.
    Fraction { fraction: f64 },
    /// Per factor, `keep` intervals chosen at random per trial.
    PerFactor { keep: usize },
    /// A fixed list of cells.
    Cells { cells: BTreeSet<Vec<usize>> },
}

impl Default for Exclusion {
    fn default() -> Self {
        Exclusion::None {}
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    /// Interval count per factor; empty means one interval each.
    #[serde(default)]
    pub intervals: Vec<usize>,
    #[serde(default)]
    pub exclude: Exclusion,
    /// Base seed for random exclusions; trial `t` derives its own stream.
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn grid(intervals: Vec<usize>, exclude: Exclusion) -> Self {
        Self {
            intervals,
            exclude,
            seed: 0,
        }
    }

    /// The concrete partition used by trial `trial`.
    pub fn resolve(&self, num_factors: usize, trial: u64) -> Result<RangePartition> {
        let intervals = if self.intervals.is_empty() {
            vec![1; num_factors]
        } else {
            self.intervals.clone()
        };
        if intervals.len() != num_factors {
            return Err(Error::config(
                "partition.intervals",
                format!("{} entries for {num_factors} factors", intervals.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, trial));
        match &self.exclude {
            Exclusion::None {} => RangePartition::new(intervals, BTreeSet::new()),
            Exclusion::Fraction { fraction } => {
                if !(0.0..1.0).contains(fraction) {
                    return Err(Error::config(
                        "partition.exclude.fraction",
                        format!("must lie in [0, 1), got {fraction}"),
                    ));
                }
                let cells: usize = intervals.iter().product();
                let count = (fraction * cells as f64).round() as usize;
                RangePartition::random_exclusion(intervals, count, &mut rng)
            }
            Exclusion::PerFactor { keep } => {
                if *keep == 0 {
                    return Err(Error::config("partition.exclude.keep", "must be at least 1"));
                }
                RangePartition::random_per_factor(intervals, *keep, &mut rng)
            }
            Exclusion::Cells { cells } => RangePartition::new(intervals, cells.clone()),
        }
    }
}

fn default_eval_every() -> u64 {
    100
}
fn default_eval_tasks() -> usize {
    500
}
fn default_test_points() -> usize {
    100
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_trials() -> usize {
    1
}

/// Full recipe of one training study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Name written to the `method` column; defaults to the method tag.
    #[serde(default)]
    pub label: Option<String>,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    #[serde(default = "ContextSpec::none")]
    pub contexts: ContextSpec,
    pub factors: Vec<FactorSpec>,
    #[serde(default)]
    pub partition: PartitionSpec,
    /// Meta-gradient budget.
    pub budget: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    #[serde(default = "default_test_points")]
    pub test_points: usize,
    /// Seed of the frozen evaluation set.
    #[serde(default)]
    pub eval_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Write measured wall time instead of 0, at the cost of byte-identical CSVs.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.to_string())
    }

    pub fn family(&self) -> TaskFamily {
        TaskFamily {
            factors: self.factors.clone(),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.network.clone(), self.contexts.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.family().validate()?;
        let arch = self.architecture()?;
        if self.budget == 0 {
            return Err(Error::config("budget", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.eval_tasks == 0 {
            return Err(Error::config("eval_tasks", "must be at least 1"));
        }
        if self.test_points == 0 {
            return Err(Error::config("test_points", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        self.partition.resolve(self.factors.len(), 0)?;
        let k = arch.contexts.k();
        let ok = match self.method {
            Method::Maml | Method::Anil => k == 0,
            Method::Cavia => k == 1,
            Method::Dmcm => k >= 1,
        };
        if !ok {
            return Err(Error::config(
                "contexts.slots",
                format!("{} contexts do not suit {}", k, self.method),
            ));
        }
        Ok(())
    }

    /// A trainer for `seed` on the partition of `trial`.
    pub fn trainer(&self, seed: u64, trial: u64) -> Result<Trainer> {
        let family = self.family();
        let partition = self.partition.resolve(family.len(), trial)?;
        Trainer::new(
            self.method,
            self.architecture()?,
            self.train.clone(),
            family,
            partition,
            derive_seed(seed, trial),
        )
    }

    pub fn eval_set(&self) -> Result<Vec<EvalTask>> {
        eval_set(
            &self.family(),
            self.eval_tasks,
            self.train.shots,
            self.test_points,
            self.eval_seed,
        )
    }
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub meta_step: u64,
    pub mean_mse: f64,
    pub ci95: f64,
    pub trial: String,
    pub wall_time_s: f64,
}

/// A frozen evaluation task: adaptation shots plus held-out query points.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub task: SineTask,
    pub support: TaskDataset,
    pub query: TaskDataset,
}

/// Tasks drawn from the full factor ranges, ignoring any exclusions.
pub fn eval_set(
    family: &TaskFamily,
    tasks: usize,
    shots: usize,
    test_points: usize,
    seed: u64,
) -> Result<Vec<EvalTask>> {
    let full = RangePartition::full(family.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..tasks)
        .map(|_| {
            let task = family.sample_task(&full, &mut rng)?;
            let support = sample_shots(&task, shots, &mut rng)?;
            let query = sample_shots(&task, test_points, &mut rng)?;
            Ok(EvalTask {
                task,
                support,
                query,
            })
        })
        .collect()
}

/// Mean and 95% half-width `1.96·sd/√n` (sample standard deviation).
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    (mean, 1.96 * sample_sd(values) / (n as f64).sqrt())
}

pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

pub fn mse(pred: &Array, target: &Array) -> f64 {
    let d = pred.data();
    let t = target.data();
    d.iter().zip(t).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / d.len() as f64
}

/// Evaluates any predictor: `predict(support, query_x)` returns predictions
/// for the query inputs.
pub fn eval_with<F>(set: &[EvalTask], mut predict: F) -> Result<(f64, f64)>
where
    F: FnMut(&TaskDataset, &Array) -> Result<Array>,
{
    let errs = set
        .iter()
        .map(|t| Ok(mse(&predict(&t.support, &t.query.x)?, &t.query.y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_ci(&errs))
}

/// Adapts the trainer's model to each task and scores the query points.
/// Never touches the trainer's parameters.
pub fn eval_tasks(trainer: &Trainer, set: &[EvalTask]) -> Result<(f64, f64)> {
    eval_with(set, |support, x| {
        let adapted = trainer.adapt(support)?;
        trainer.predict(&adapted, x)
    })
}

/// SplitMix64 of `a` combined with `b`; independent streams per run.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_in_every_table() {
        let mut cfg = presets::a1(Method::Dmcm, 10, Exclusion::None {});
        cfg.partition.exclude = Exclusion::None {};
        let text = toml::to_string(&cfg).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate().filter(|(_, l)| l.starts_with('[')) {
            let mut edited = lines.clone();
            edited.insert(i + 1, "bogus = 1");
            let r = toml::from_str::<ExperimentConfig>(&edited.join("\n"));
            assert!(r.is_err(), "accepted an unknown key under {line}");
        }
        let r = toml::from_str::<ExperimentConfig>(&format!("bogus = 1\n{text}"));
        assert!(r.is_err());
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let set = eval_set(&TaskFamily::sine2(), 20, 5, 30, 1).unwrap();
        let mut i = 0;
        let (m, ci) = eval_with(&set, |_, _| {
            i += 1;
            Ok(set[i - 1].query.y.clone())
        })
        .unwrap();
        assert_eq!((m, ci), (0.0, 0.0));
    }

    #[test]
    fn ci_matches_direct_formula() {
        let v = [0.1, 0.4, 0.2, 0.9];
        let (m, ci) = mean_ci(&v);
        assert!((m - 0.4).abs() < 1e-15);
        let var = ((0.09 + 0.0 + 0.04 + 0.25) / 3.0f64).sqrt();
        assert!((ci - 1.96 * var / 2.0).abs() < 1e-15);
        assert_eq!(mean_ci(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn fraction_exclusion_counts() {
        let p = PartitionSpec::grid(vec![5, 5], Exclusion::Fraction { fraction: 0.6 });
        let a = p.resolve(2, 3).unwrap();
        assert_eq!(a.excluded_cells.len(), 15);
        assert_eq!(a, p.resolve(2, 3).unwrap());
        assert_ne!(a, p.resolve(2, 4).unwrap());
        let per = PartitionSpec::grid(vec![4, 4, 4], Exclusion::PerFactor { keep: 2 });
        assert!((per.resolve(3, 0).unwrap().coverage() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn eval_set_is_frozen_by_seed() {
        let a = eval_set(&TaskFamily::sine3(), 5, 10, 100, 9).unwrap();
        assert_eq!(a, eval_set(&TaskFamily::sine3(), 5, 10, 100, 9).unwrap());
        assert_eq!(a[0].query.len(), 100);
        assert_eq!(a[0].support.len(), 10);
    }
}
