use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::Trainer;

use super::{eval_tasks, EvalTask, ExperimentConfig, MetricRow};

/// One training run: a config, a seed and a trial of its partition.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub trial: u64,
    /// Written to the `trial` column.
    pub trial_label: String,
}

impl RunSpec {
    pub fn key(&self) -> (String, u64, String) {
        (self.config.label(), self.seed, self.trial_label.clone())
    }

    pub fn start(&self) -> Result<RunState> {
        Ok(RunState {
            label: self.config.label(),
            seed: self.seed,
            trial: self.trial_label.clone(),
            trainer: self.config.trainer(self.seed, self.trial)?,
            config: self.config.clone(),
            rows: Vec::new(),
            elapsed_s: 0.0,
            failure: None,
        })
    }

    /// Every (seed, trial) of `config`, seeds outermost.
    pub fn expand(config: &ExperimentConfig, setting: &str) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &seed in &config.seeds {
            for t in 0..config.trials as u64 {
                let trial_label = if setting.is_empty() {
                    format!("t{t}")
                } else {
                    format!("{setting}-t{t}")
                };
                out.push(RunSpec {
                    config: config.clone(),
                    seed,
                    trial: t,
                    trial_label,
                });
            }
        }
        out
    }
}

/// Progress of one run; serializable so a run can be resumed mid-way.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub label: String,
    pub seed: u64,
    pub trial: String,
    pub trainer: Trainer,
    /// Recipe the run was started with.
    pub config: ExperimentConfig,
    pub rows: Vec<MetricRow>,
    pub elapsed_s: f64,
    /// Set when training diverged; the run stops there.
    pub failure: Option<String>,
}

impl RunState {
    pub fn key(&self) -> (String, u64, String) {
        (self.label.clone(), self.seed, self.trial.clone())
    }

    pub fn finished(&self, budget: u64) -> bool {
        self.failure.is_some() || self.trainer.meta_steps >= budget
    }

    /// Rejects a saved state whose parameters do not fit `config`.
    pub fn check_against(&self, config: &ExperimentConfig) -> Result<()> {
        let arch = config.architecture()?;
        let expected = arch.layer_shapes();
        let layers = &self.trainer.params.layers;
        if layers.len() != expected.len() {
            return Err(Error::CheckpointShape {
                layer: "layers".into(),
                expected: vec![expected.len()],
                found: vec![layers.len()],
            });
        }
        for (i, (l, &(fan_in, fan_out))) in layers.iter().zip(&expected).enumerate() {
            let w = vec![fan_in, fan_out];
            if l.weight.shape() != w.as_slice() {
                return Err(Error::CheckpointShape {
                    layer: format!("layer {i} weight"),
                    expected: w,
                    found: l.weight.shape().to_vec(),
                });
            }
            let b = vec![1, fan_out];
            if l.bias.shape() != b.as_slice() {
                return Err(Error::CheckpointShape {
                    layer: format!("layer {i} bias"),
                    expected: b,
                    found: l.bias.shape().to_vec(),
                });
            }
        }
        if self.trainer.arch != arch || self.trainer.method != config.method {
            return Err(Error::config(
                "resume",
                format!("checkpoint for `{}` was made with a different model", self.label),
            ));
        }
        Ok(())
    }

    fn row(&self, cfg: &ExperimentConfig, mean: f64, ci: f64) -> MetricRow {
        MetricRow {
            method: self.label.clone(),
            seed: self.seed,
            meta_step: self.trainer.meta_steps,
            mean_mse: mean,
            ci95: ci,
            trial: self.trial.clone(),
            wall_time_s: if cfg.record_wall_time { self.elapsed_s } else { 0.0 },
        }
    }

    /// Trains to the budget, evaluating every `eval_every` steps and at the
    /// end. `on_eval` sees the state after each new row.
    pub fn advance(
        &mut self,
        cfg: &ExperimentConfig,
        set: &[EvalTask],
        on_eval: &(dyn Fn(&RunState) -> Result<()> + Sync),
    ) -> Result<()> {
        while !self.finished(cfg.budget) {
            let t0 = Instant::now();
            let stepped = self.trainer.step();
            self.elapsed_s += t0.elapsed().as_secs_f64();
            match stepped {
                Ok(r) if r.basic_loss.is_finite() => {}
                Ok(_) => self.failure = Some("non-finite training loss".into()),
                Err(e) if e.is_numerical() => self.failure = Some(e.to_string()),
                Err(e) => return Err(e),
            }
            if self.failure.is_some() {
                self.rows.push(self.row(cfg, f64::NAN, f64::NAN));
                on_eval(self)?;
                break;
            }
            let step = self.trainer.meta_steps;
            if step % cfg.eval_every == 0 || step == cfg.budget {
                let (mean, ci) = match eval_tasks(&self.trainer, set) {
                    Ok(v) => v,
                    Err(e) if e.is_numerical() => (f64::NAN, f64::NAN),
                    Err(e) => return Err(e),
                };
                if !mean.is_finite() {
                    self.failure = Some(format!("non-finite evaluation loss at step {step}"));
                }
                self.rows.push(self.row(cfg, mean, ci));
                on_eval(self)?;
            }
        }
        Ok(())
    }
}

/// Runs every spec on a pool of `workers` threads. Results keep the order of
/// `specs` and do not depend on the worker count. States in `resume` whose
/// key matches a spec continue from where they stopped.
pub fn run_many(
    specs: &[RunSpec],
    workers: usize,
    resume: &[RunState],
    on_eval: &(dyn Fn(&RunState) -> Result<()> + Sync),
) -> Result<Vec<RunState>> {
    for s in specs {
        s.config.validate()?;
    }
    let job = |spec: &RunSpec| -> Result<RunState> {
        let mut state = match resume.iter().find(|r| r.key() == spec.key()) {
            Some(saved) => {
                saved.check_against(&spec.config)?;
                let mut s = saved.clone();
                s.config = spec.config.clone();
                s
            }
            None => spec.start()?,
        };
        let set = spec.config.eval_set()?;
        state.advance(&spec.config, &set, on_eval)?;
        Ok(state)
    };
    if workers <= 1 {
        return specs.iter().map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| specs.par_iter().map(job).collect())
}

/// Training curves of `config` over its seeds and trials.
pub fn run_training_curve(
    config: &ExperimentConfig,
    workers: usize,
    resume: &[RunState],
    on_eval: &(dyn Fn(&RunState) -> Result<()> + Sync),
) -> Result<Vec<MetricRow>> {
    let specs = RunSpec::expand(config, "");
    let states = run_many(&specs, workers, resume, on_eval)?;
    Ok(states.into_iter().flat_map(|s| s.rows).collect())
}
