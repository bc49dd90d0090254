use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{GradOrder, Method, Trainer};
use crate::tasks::{sample_shots, FactorKind, RangePartition, TaskDataset, TaskFamily};

use super::presets::{a1, a3_zeroshot, b1, b1_maml, b4_param, NContext};
use super::runner::{run_many, RunSpec, RunState};
use super::{eval_set, mean_ci, mse, sample_sd, Exclusion, ExperimentConfig, MetricRow};

/// Which model a zero-shot study trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroShotModel {
    /// Two input contexts over amplitude and phase.
    #[default]
    TwoContext,
    /// The three-context layout of the three-factor study, recombination on.
    ThreeContext,
    /// Same, trained without the recombination loop.
    ThreeContextNoLoop,
}

fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn d_fractions() -> Vec<f64> {
    vec![0.4, 0.6, 0.8]
}
fn d_methods() -> Vec<Method> {
    vec![Method::Dmcm, Method::Cavia]
}
fn d_rates() -> Vec<f64> {
    vec![0.0, 0.1, 0.2]
}
fn d_sizes() -> Vec<usize> {
    vec![1, 2, 3, 6]
}
fn d_layouts() -> Vec<NContext> {
    NContext::ALL.to_vec()
}
fn d_report_steps() -> Vec<u64> {
    vec![2000, 4000]
}

/// Knobs shared by the canned studies. Unset overrides keep each recipe's own
/// value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub budget: Option<u64>,
    pub eval_every: Option<u64>,
    pub eval_tasks: Option<usize>,
    pub test_points: Option<usize>,
    pub eval_seed: u64,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Random partitions per setting, for studies with exclusions.
    pub trials: usize,
    pub shots: usize,
    pub grad_order: Option<GradOrder>,
    pub record_wall_time: bool,
    #[serde(default = "d_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_report_steps")]
    pub report_steps: Vec<u64>,
    #[serde(default = "d_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "d_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "d_layouts")]
    pub layouts: Vec<NContext>,
    pub zeroshot_model: ZeroShotModel,
    pub pairs: usize,
    /// Amplitude range of the restricted zero-shot evaluation.
    pub restrict_amp: Option<(f64, f64)>,
    pub timing_steps: u64,
    pub adapt_tasks: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            budget: None,
            eval_every: None,
            eval_tasks: None,
            test_points: None,
            eval_seed: 0,
            seeds: d_seeds(),
            trials: 1,
            shots: 10,
            grad_order: None,
            record_wall_time: false,
            fractions: d_fractions(),
            methods: d_methods(),
            report_steps: d_report_steps(),
            rates: d_rates(),
            sizes: d_sizes(),
            layouts: d_layouts(),
            zeroshot_model: ZeroShotModel::default(),
            pairs: 500,
            restrict_amp: Some((1.5, 5.0)),
            timing_steps: 400,
            adapt_tasks: 300,
        }
    }
}

impl StudyConfig {
    /// Copies the overrides into `cfg`.
    pub fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(e) = self.eval_every {
            cfg.eval_every = e;
        }
        if let Some(n) = self.eval_tasks {
            cfg.eval_tasks = n;
        }
        if let Some(n) = self.test_points {
            cfg.test_points = n;
        }
        if let Some(g) = self.grad_order {
            cfg.train.grad_order = g;
        }
        cfg.eval_seed = self.eval_seed;
        cfg.seeds = self.seeds.clone();
        cfg.trials = self.trials.max(1);
        cfg.record_wall_time = self.record_wall_time;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.shots == 0 {
            return Err(Error::config("shots", "must be at least 1"));
        }
        if let Some((lo, hi)) = self.restrict_amp {
            if !(lo < hi) {
                return Err(Error::config(
                    "restrict_amp",
                    format!("empty range {lo}:{hi}"),
                ));
            }
        }
        Ok(())
    }
}

/// Aggregate over runs of one setting at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub label: String,
    /// Part of the trial identifier before `-t<n>`; empty when absent.
    pub setting: String,
    pub meta_step: u64,
    pub mean: f64,
    /// Sample standard deviation across runs.
    pub sd: f64,
    pub runs: usize,
}

fn setting_of(trial: &str) -> &str {
    match trial.rsplit_once("-t") {
        Some((s, n)) if n.chars().all(|c| c.is_ascii_digit()) => s,
        _ => "",
    }
}

/// Per (label, setting), the mean and spread across runs of the row at
/// `step`, or of each run's last row when `step` is `None`. A run that
/// stopped early contributes its last row.
pub fn final_summary(rows: &[MetricRow], step: Option<u64>) -> Vec<FinalSummary> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut runs: Vec<Vec<(u64, String)>> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), setting_of(&r.trial).to_string());
        let g = match order.iter().position(|k| *k == key) {
            Some(g) => g,
            None => {
                order.push(key);
                runs.push(Vec::new());
                runs.len() - 1
            }
        };
        let id = (r.seed, r.trial.clone());
        if !runs[g].contains(&id) {
            runs[g].push(id);
        }
    }
    order
        .into_iter()
        .zip(runs)
        .map(|((label, setting), ids)| {
            let picked: Vec<&MetricRow> = ids
                .iter()
                .filter_map(|(seed, trial)| {
                    let mine: Vec<&MetricRow> = rows
                        .iter()
                        .filter(|r| r.method == label && r.seed == *seed && &r.trial == trial)
                        .collect();
                    let at = step.and_then(|s| mine.iter().find(|r| r.meta_step == s).copied());
                    at.or_else(|| mine.last().copied())
                })
                .collect();
            let values: Vec<f64> = picked.iter().map(|r| r.mean_mse).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            FinalSummary {
                label,
                setting,
                meta_step: step.unwrap_or_else(|| {
                    picked.iter().map(|r| r.meta_step).max().unwrap_or(0)
                }),
                mean,
                sd: sample_sd(&values),
                runs: values.len(),
            }
        })
        .collect()
}

/// Rows of all runs plus per-setting aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<FinalSummary>,
}

pub type OodReport = StudyReport;
pub type NContextReport = StudyReport;
pub type OodSummary = FinalSummary;

type OnEval<'a> = &'a (dyn Fn(&RunState) -> Result<()> + Sync);

fn run_specs(
    specs: &[RunSpec],
    workers: usize,
    resume: &[RunState],
    on_eval: OnEval,
) -> Result<Vec<MetricRow>> {
    let states = run_many(specs, workers, resume, on_eval)?;
    Ok(states.into_iter().flat_map(|s| s.rows).collect())
}

/// Range-exclusion sweep: per method and excluded fraction, `trials` random
/// exclusion sets, each trained and evaluated on the full ranges.
pub fn run_ood_sweep(
    study: &StudyConfig,
    workers: usize,
    resume: &[RunState],
    on_eval: OnEval,
) -> Result<OodReport> {
    study.validate()?;
    let mut specs = Vec::new();
    for &m in &study.methods {
        for &f in &study.fractions {
            let cfg = study.apply(a1(m, study.shots, Exclusion::Fraction { fraction: f }));
            specs.extend(RunSpec::expand(&cfg, &format!("x{:.0}", f * 100.0)));
        }
    }
    let rows = run_specs(&specs, workers, resume, on_eval)?;
    let summary = study
        .report_steps
        .iter()
        .flat_map(|&s| final_summary(&rows, Some(s)))
        .collect();
    Ok(StudyReport { rows, summary })
}

/// Table of zero-shot composition errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub pairs: usize,
    /// All contexts adapted on the target itself.
    pub self_adapted: (f64, f64),
    /// Each context adapted on its own source task over the full ranges.
    pub full_range: (f64, f64),
    /// Same, with every amplitude inside the restriction.
    pub restricted: Option<(f64, f64)>,
    pub rows: Vec<MetricRow>,
}

/// Copy of `family` with amplitude factors clipped to `[lo, hi]`.
pub fn restrict_amplitude(family: &TaskFamily, lo: f64, hi: f64) -> Result<TaskFamily> {
    let mut out = family.clone();
    for f in out.factors.iter_mut().filter(|f| f.kind == FactorKind::Amplitude) {
        let (a, b) = (f.low.max(lo), f.high.min(hi));
        if !(a < b) {
            return Err(Error::config(
                "restrict_amp",
                format!("{lo}:{hi} does not overlap `{}` range {}:{}", f.name, f.low, f.high),
            ));
        }
        f.low = a;
        f.high = b;
    }
    Ok(out)
}

/// Per-pair errors of composing contexts adapted on separate source tasks.
/// Source `s` shares the factors of context `s` with the target; all other
/// factors are redrawn. Returns (self-adapted, composed) per-pair MSEs.
pub fn zero_shot_errors(
    trainer: &Trainer,
    family: &TaskFamily,
    pairs: usize,
    test_points: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if trainer.method != Method::Dmcm {
        return Err(Error::config("method", "zero-shot composition needs dmcm"));
    }
    let full = RangePartition::full(family.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shots = trainer.cfg.shots;
    let (mut own, mut composed) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    for _ in 0..pairs {
        let target = family.sample_task(&full, &mut rng)?;
        let support = sample_shots(&target, shots, &mut rng)?;
        let query = sample_shots(&target, test_points, &mut rng)?;
        let sources = trainer
            .groups
            .groups
            .iter()
            .map(|g| {
                let redraw: Vec<usize> = (0..family.len()).filter(|i| !g.contains(i)).collect();
                let task = family.sample_conditional(&target, &redraw, &full, &mut rng)?;
                sample_shots(&task, shots, &mut rng)
            })
            .collect::<Result<Vec<TaskDataset>>>()?;
        let a = trainer.adapt(&support)?;
        own.push(mse(&trainer.predict(&a, &query.x)?, &query.y));
        let refs: Vec<&TaskDataset> = sources.iter().collect();
        let c = trainer.compose(&refs)?;
        composed.push(mse(&trainer.predict(&c, &query.x)?, &query.y));
    }
    Ok((own, composed))
}

/// Evaluates one trained model: self-adapted and composed errors over the
/// full ranges, plus composed errors under the amplitude restriction.
pub fn zero_shot_eval(
    trainer: &Trainer,
    family: &TaskFamily,
    pairs: usize,
    test_points: usize,
    restrict: Option<(f64, f64)>,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
    let (own, full) = zero_shot_errors(trainer, family, pairs, test_points, seed)?;
    let restricted = match restrict {
        Some((lo, hi)) => {
            let fam = restrict_amplitude(family, lo, hi)?;
            Some(zero_shot_errors(trainer, &fam, pairs, test_points, seed ^ 0x5EED)?.1)
        }
        None => None,
    };
    Ok((own, full, restricted))
}

fn zeroshot_config(model: ZeroShotModel) -> ExperimentConfig {
    match model {
        ZeroShotModel::TwoContext => a3_zeroshot(),
        ZeroShotModel::ThreeContext | ZeroShotModel::ThreeContextNoLoop => {
            let mut cfg = b1(NContext::Three, false);
            cfg.train.recombination = model == ZeroShotModel::ThreeContext;
            cfg.label = Some(
                if cfg.train.recombination { "3ctx-loop" } else { "3ctx-noloop" }.into(),
            );
            cfg
        }
    }
}

/// Trains the zero-shot model for every seed, then pools the per-pair errors
/// of all seeds.
pub fn run_zeroshot(
    study: &StudyConfig,
    workers: usize,
    resume: &[RunState],
    on_eval: OnEval,
) -> Result<ZeroShotReport> {
    study.validate()?;
    let mut cfg = study.apply(zeroshot_config(study.zeroshot_model));
    cfg.train.shots = study.shots;
    cfg.trials = 1;
    let specs = RunSpec::expand(&cfg, "");
    let states = run_many(&specs, workers, resume, on_eval)?;
    let family = cfg.family();
    let (mut own, mut full, mut restricted) = (Vec::new(), Vec::new(), Vec::new());
    for s in &states {
        if s.failure.is_some() {
            own.push(f64::NAN);
            full.push(f64::NAN);
            restricted.push(f64::NAN);
            continue;
        }
        let (o, f, r) = zero_shot_eval(
            &s.trainer,
            &family,
            study.pairs,
            cfg.test_points,
            study.restrict_amp,
            cfg.eval_seed,
        )?;
        own.extend(o);
        full.extend(f);
        restricted.extend(r.unwrap_or_default());
    }
    Ok(ZeroShotReport {
        pairs: study.pairs,
        self_adapted: mean_ci(&own),
        full_range: mean_ci(&full),
        restricted: study.restrict_amp.map(|_| mean_ci(&restricted)),
        rows: states.into_iter().flat_map(|s| s.rows).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MislabelEntry {
    pub rate: f64,
    pub mean: f64,
    pub sd: f64,
    /// Relative to the first rate, in percent.
    pub increase_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MislabelReport {
    pub rows: Vec<MetricRow>,
    pub entries: Vec<MislabelEntry>,
}

/// DMCM on the two-factor recipe with label corruption at each rate,
/// evaluated at the end of a 6000-step budget unless overridden.
pub fn run_mislabel(
    study: &StudyConfig,
    workers: usize,
    resume: &[RunState],
    on_eval: OnEval,
) -> Result<MislabelReport> {
    study.validate()?;
    let mut specs = Vec::new();
    for &rate in &study.rates {
        let mut base = a1(Method::Dmcm, study.shots, Exclusion::None {});
        base.budget = 6000;
        let mut cfg = study.apply(base);
        cfg.train.mislabel_rate = rate;
        cfg.trials = 1;
        cfg.label = Some(format!("dmcm-p{rate}"));
        specs.extend(RunSpec::expand(&cfg, ""));
    }
    let rows = run_specs(&specs, workers, resume, on_eval)?;
    let summary = final_summary(&rows, None);
    let base = summary.first().map(|s| s.mean).unwrap_or(f64::NAN);
    let entries = study
        .rates
        .iter()
        .zip(&summary)
        .map(|(&rate, s)| MislabelEntry {
            rate,
            mean: s.mean,
            sd: s.sd,
            increase_pct: 100.0 * (s.mean - base) / base,
        })
        .collect();
    Ok(MislabelReport { rows, entries })
}

/// Every context layout of the three-factor study, on the full ranges and
/// with two of four intervals per factor kept.
pub fn run_ncontext(
    study: &StudyConfig,
    workers: usize,
    resume: &[RunState],
    on_eval: OnEval,
) -> Result<NContextReport> {
    study.validate()?;
    let mut specs = Vec::new();
    for &ood in &[false, true] {
        for &layout in &study.layouts {
            let mut cfg = study.apply(b1(layout, ood));
            cfg.train.shots = study.shots;
            if !ood {
                cfg.trials = 1;
            }
            specs.extend(RunSpec::expand(&cfg, if ood { "ood" } else { "full" }));
        }
    }
    let rows = run_specs(&specs, workers, resume, on_eval)?;
    let summary = final_summary(&rows, None);
    Ok(StudyReport { rows, summary })
}

/// Two-context models whose entangled amplitude-phase context takes each size.
pub fn run_param_ablation(
    study: &StudyConfig,
    workers: usize,
    resume: &[RunState],
    on_eval: OnEval,
) -> Result<StudyReport> {
    study.validate()?;
    let mut specs = Vec::new();
    for &size in &study.sizes {
        let mut cfg = study.apply(b4_param(size));
        cfg.train.shots = study.shots;
        cfg.trials = 1;
        specs.extend(RunSpec::expand(&cfg, ""));
    }
    let rows = run_specs(&specs, workers, resume, on_eval)?;
    let summary = final_summary(&rows, None);
    Ok(StudyReport { rows, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub label: String,
    pub meta_steps: u64,
    pub train_s: f64,
    pub adapt_tasks: usize,
    pub adapt_s: f64,
}

/// Configurations of the timing table, in table order.
pub fn timing_configs() -> Vec<ExperimentConfig> {
    let mut out = vec![b1_maml()];
    for (layout, label) in [
        (NContext::One, "cavia(1)"),
        (NContext::Two, "dmcm(2)"),
        (NContext::Three, "dmcm(3)"),
        (NContext::Four, "dmcm(4)"),
    ] {
        let mut cfg = b1(layout, false);
        cfg.label = Some(label.into());
        out.push(cfg);
    }
    out
}

/// Wall time of the training loop and of adapting to a fixed task set, per
/// configuration, on the calling thread.
pub fn run_timing(study: &StudyConfig) -> Result<Vec<TimingEntry>> {
    study.validate()?;
    let seed = study.seeds[0];
    timing_configs()
        .into_iter()
        .map(|cfg| {
            let mut cfg = study.apply(cfg);
            cfg.train.shots = study.shots;
            cfg.validate()?;
            let mut trainer = cfg.trainer(seed, 0)?;
            let t0 = Instant::now();
            for _ in 0..study.timing_steps {
                trainer.step()?;
            }
            let train_s = t0.elapsed().as_secs_f64();
            let set = eval_set(&cfg.family(), study.adapt_tasks, study.shots, 1, cfg.eval_seed)?;
            let t1 = Instant::now();
            for t in &set {
                std::hint::black_box(trainer.adapt(&t.support)?);
            }
            Ok(TimingEntry {
                label: cfg.label(),
                meta_steps: study.timing_steps,
                train_s,
                adapt_tasks: study.adapt_tasks,
                adapt_s: t1.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, step: u64, mse: f64, trial: &str) -> MetricRow {
        MetricRow {
            method: method.into(),
            seed,
            meta_step: step,
            mean_mse: mse,
            ci95: 0.0,
            trial: trial.into(),
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn summary_groups_by_label_and_setting() {
        let rows = vec![
            row("a", 0, 10, 1.0, "x60-t0"),
            row("a", 0, 20, 0.5, "x60-t0"),
            row("a", 0, 10, 3.0, "x60-t1"),
            row("a", 0, 20, 1.5, "x60-t1"),
            row("a", 0, 20, 9.0, "x80-t0"),
            row("b", 1, 20, 2.0, "t0"),
        ];
        let s = final_summary(&rows, Some(10));
        assert_eq!(s[0].setting, "x60");
        assert_eq!(s[0].mean, 2.0);
        assert!((s[0].sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].setting, "x80");
        assert_eq!(s[1].mean, 9.0, "falls back to the last row");
        let last = final_summary(&rows, None);
        assert_eq!(last[0].mean, 1.0);
        assert_eq!(last[2].label, "b");
        assert_eq!(last[2].setting, "");
    }

    #[test]
    fn restriction_clips_amplitudes_only() {
        let f = restrict_amplitude(&TaskFamily::sine3(), 1.5, 5.0).unwrap();
        assert_eq!((f.factors[0].low, f.factors[0].high), (1.5, 5.0));
        assert_eq!(f.factors[1], TaskFamily::sine3().factors[1]);
        assert!(restrict_amplitude(&TaskFamily::sine2(), 6.0, 7.0).is_err());
    }

    #[test]
    fn study_config_parses_partial_toml() {
        let s: StudyConfig = toml::from_str("budget = 50\nseeds = [4]\nrestrict_amp = [1.5, 5.0]").unwrap();
        assert_eq!(s.budget, Some(50));
        assert_eq!(s.seeds, vec![4]);
        assert_eq!(s.rates, d_rates());
        assert!(toml::from_str::<StudyConfig>("bogus = 1").is_err());
    }
}
