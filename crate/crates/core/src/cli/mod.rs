//! Command-line front end: config loading, run orchestration, checkpoints and
//! output files.

mod output;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Array, Tensor};
use crate::error::{Error, Result};
use crate::experiments::{
    eval_tasks, run_mislabel, run_ncontext, run_ood_sweep, run_param_ablation, run_timing,
    run_training_curve, run_zeroshot, ExperimentConfig, MetricRow, RunState, StudyConfig,
};
use crate::meta::{inner_adapt, GradOrder, TrainConfig};
use crate::model::{mse_loss, Architecture, ContextSpec, LayerVars, NetworkConfig};
use crate::tasks::{RangePartition, TaskFamily};
use crate::meta::TaskSampler;

pub use output::{curves_svg, metrics_csv, write_atomic, write_json, CSV_HEADER};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dmcm", version, about = "Disentangled multi-context meta-learning on sine regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train one config and write its learning curves.
    Train,
    /// Re-evaluate every run stored in a checkpoint.
    Eval,
    /// Range-exclusion sweep comparing methods.
    SweepOod,
    /// Zero-shot composition of separately adapted contexts.
    Zeroshot,
    /// Training with corrupted context labels.
    Mislabel,
    /// Context-layout ablation on the three-factor family.
    Ncontext,
    /// Entangled context size ablation.
    ParamAblation,
    /// Training and adaptation wall time per method.
    Timing,
    /// Check first- and second-order gradients against finite differences.
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::SweepOod => "sweep-ood",
            Command::Zeroshot => "zeroshot",
            Command::Mislabel => "mislabel",
            Command::Ncontext => "ncontext",
            Command::ParamAblation => "param-ablation",
            Command::Timing => "timing",
            Command::Gradcheck => "gradcheck",
        }
    }
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo < hi) {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

#[derive(Clone, Debug, Default, Args)]
pub struct Opts {
    /// TOML config. `train` takes a full experiment; the studies take overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed, repeatable; replaces the config's seed list.
    #[arg(long = "seed", global = true)]
    pub seeds: Vec<u64>,
    /// Output directory, `runs/<command>` by default.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    #[arg(long, global = true, env = "DMCM_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// first | second
    #[arg(long, global = true)]
    pub grad_order: Option<GradOrder>,
    /// Amplitude range of the restricted zero-shot evaluation.
    #[arg(long, global = true, value_name = "LO:HI", value_parser = parse_range)]
    pub restrict_amp: Option<(f64, f64)>,
    /// Stop once any run reaches this meta-step, keeping the checkpoint.
    #[arg(long, global = true, hide = true)]
    pub halt_after: Option<u64>,
}

/// Saved progress of a command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub command: String,
    /// The resolved config, as written to the manifest.
    pub config: serde_json::Value,
    pub runs: Vec<RunState>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }
}

/// What a command produced; `numerical_failure` selects exit code 2.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub numerical_failure: bool,
    pub halted: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::Toml(_)
        | Error::Json(_)
        | Error::Io { .. }
        | Error::CheckpointVersion { .. }
        | Error::CheckpointShape { .. } => 1,
        _ => 2,
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(toml::from_str(&text)?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    workers: usize,
    resumed_from: Option<&'a Path>,
    config: &'a serde_json::Value,
}

struct Session<'a> {
    cmd: Command,
    opts: &'a Opts,
    out: PathBuf,
    config: serde_json::Value,
    runs: Mutex<Vec<RunState>>,
}

impl<'a> Session<'a> {
    fn checkpoint_path(&self) -> PathBuf {
        self.out.join("checkpoint.json")
    }

    fn write_manifest(&self) -> Result<()> {
        write_json(
            &self.out.join("manifest.json"),
            &Manifest {
                command: self.cmd.name(),
                version: env!("CARGO_PKG_VERSION"),
                workers: self.opts.workers,
                resumed_from: self.opts.resume.as_deref(),
                config: &self.config,
            },
        )
    }

    fn record(&self, state: &RunState) -> Result<()> {
        let mut runs = self.runs.lock().unwrap_or_else(|p| p.into_inner());
        match runs.iter_mut().find(|r| r.key() == state.key()) {
            Some(slot) => *slot = state.clone(),
            None => runs.push(state.clone()),
        }
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            command: self.cmd.name().into(),
            config: self.config.clone(),
            runs: runs.clone(),
        };
        write_json(&self.checkpoint_path(), &ck)?;
        match self.opts.halt_after {
            Some(h) if state.trainer.meta_steps >= h => Err(Error::Halted(state.trainer.meta_steps)),
            _ => Ok(()),
        }
    }

    fn finish(&self, rows: Vec<MetricRow>, title: &str) -> Result<Outcome> {
        write_atomic(&self.out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
        write_atomic(&self.out.join("curves.svg"), curves_svg(&rows, title).as_bytes())?;
        Ok(Outcome {
            out_dir: self.out.clone(),
            numerical_failure: rows.iter().any(|r| !r.mean_mse.is_finite()),
            rows,
            halted: false,
        })
    }
}

fn load_resume(opts: &Opts, cmd: Command) -> Result<Option<Checkpoint>> {
    let Some(path) = &opts.resume else {
        return Ok(None);
    };
    let ck = Checkpoint::load(path)?;
    if ck.command != cmd.name() && cmd != Command::Eval {
        return Err(Error::config(
            "resume",
            format!("checkpoint was written by `{}`, not `{}`", ck.command, cmd.name()),
        ));
    }
    Ok(Some(ck))
}

fn experiment_config(opts: &Opts, resume: Option<&Checkpoint>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match (&opts.config, resume) {
        (Some(p), _) => read_toml(p)?,
        (None, Some(ck)) => serde_json::from_value(ck.config.clone())?,
        (None, None) => return Err(Error::config("config", "`train` needs --config")),
    };
    if !opts.seeds.is_empty() {
        cfg.seeds = opts.seeds.clone();
    }
    if let Some(g) = opts.grad_order {
        cfg.train.grad_order = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn study_config(opts: &Opts, resume: Option<&Checkpoint>) -> Result<StudyConfig> {
    let mut cfg: StudyConfig = match (&opts.config, resume) {
        (Some(p), _) => read_toml(p)?,
        (None, Some(ck)) => serde_json::from_value(ck.config.clone())?,
        (None, None) => StudyConfig::default(),
    };
    if !opts.seeds.is_empty() {
        cfg.seeds = opts.seeds.clone();
    }
    if opts.grad_order.is_some() {
        cfg.grad_order = opts.grad_order;
    }
    if opts.restrict_amp.is_some() {
        cfg.restrict_amp = opts.restrict_amp;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command, writing its files under the output directory.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let cmd = cli.command;
    let opts = &cli.opts;
    if opts.workers == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    if cmd == Command::Gradcheck {
        let seed = opts.seeds.first().copied().unwrap_or(0);
        let (first, second) = gradcheck_errors(seed)?;
        println!("first-order max relative error:  {first:.3e}");
        println!("second-order max relative error: {second:.3e}");
        let ok = first <= GRADCHECK_TOLERANCE && second <= GRADCHECK_TOLERANCE;
        println!("{}", if ok { "gradcheck passed" } else { "gradcheck FAILED" });
        return Ok(Outcome {
            numerical_failure: !ok,
            ..Outcome::default()
        });
    }
    let resume = load_resume(opts, cmd)?;
    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));

    if cmd == Command::Eval {
        let ck = resume.ok_or_else(|| Error::config("resume", "`eval` needs --resume CHECKPOINT"))?;
        return eval_checkpoint(&ck, &out);
    }

    let (config, study, experiment) = if cmd == Command::Train {
        let cfg = experiment_config(opts, resume.as_ref())?;
        (serde_json::to_value(&cfg)?, None, Some(cfg))
    } else {
        let cfg = study_config(opts, resume.as_ref())?;
        (serde_json::to_value(&cfg)?, Some(cfg), None)
    };
    let saved = resume.map(|c| c.runs).unwrap_or_default();
    let session = Session {
        cmd,
        opts,
        out,
        config,
        runs: Mutex::new(saved.clone()),
    };
    session.write_manifest()?;
    let hook = |s: &RunState| session.record(s);
    let workers = opts.workers;

    let result = (|| -> Result<Outcome> {
        match cmd {
            Command::Train => {
                let cfg = experiment.as_ref().expect("train config");
                let rows = run_training_curve(cfg, workers, &saved, &hook)?;
                session.finish(rows, &format!("{} training curve", cfg.label()))
            }
            Command::SweepOod => {
                let rep = run_ood_sweep(study.as_ref().unwrap(), workers, &saved, &hook)?;
                write_json(&session.out.join("summary.json"), &rep.summary)?;
                for s in &rep.summary {
                    println!(
                        "{:<8} {:<6} step {:>5}  mean {:.4}  sd {:.4}  runs {}",
                        s.label, s.setting, s.meta_step, s.mean, s.sd, s.runs
                    );
                }
                session.finish(rep.rows, "range-exclusion sweep")
            }
            Command::Zeroshot => {
                let rep = run_zeroshot(study.as_ref().unwrap(), workers, &saved, &hook)?;
                write_json(&session.out.join("summary.json"), &rep)?;
                println!("pairs {}", rep.pairs);
                println!("self-adapted        {:.4} ± {:.4}", rep.self_adapted.0, rep.self_adapted.1);
                println!("full-range recomb.  {:.4} ± {:.4}", rep.full_range.0, rep.full_range.1);
                if let Some((m, c)) = rep.restricted {
                    println!("restricted recomb.  {m:.4} ± {c:.4}");
                }
                let mut o = session.finish(rep.rows.clone(), "zero-shot model training")?;
                o.numerical_failure |= !rep.self_adapted.0.is_finite();
                Ok(o)
            }
            Command::Mislabel => {
                let rep = run_mislabel(study.as_ref().unwrap(), workers, &saved, &hook)?;
                write_json(&session.out.join("summary.json"), &rep.entries)?;
                for e in &rep.entries {
                    println!(
                        "rate {:<4} mean {:.4}  sd {:.4}  change {:+.1}%",
                        e.rate, e.mean, e.sd, e.increase_pct
                    );
                }
                session.finish(rep.rows, "mislabelled contexts")
            }
            Command::Ncontext | Command::ParamAblation => {
                let s = study.as_ref().unwrap();
                let rep = if cmd == Command::Ncontext {
                    run_ncontext(s, workers, &saved, &hook)?
                } else {
                    run_param_ablation(s, workers, &saved, &hook)?
                };
                write_json(&session.out.join("summary.json"), &rep.summary)?;
                for s in &rep.summary {
                    println!(
                        "{:<18} {:<5} step {:>5}  mean {:.4}  sd {:.4}",
                        s.label, s.setting, s.meta_step, s.mean, s.sd
                    );
                }
                session.finish(rep.rows, cmd.name())
            }
            Command::Timing => {
                let entries = run_timing(study.as_ref().unwrap())?;
                write_json(&session.out.join("timing.json"), &entries)?;
                println!("{:<10} {:>12} {:>12}", "config", "train (s)", "adapt (s)");
                for e in &entries {
                    println!("{:<10} {:>12.3} {:>12.3}", e.label, e.train_s, e.adapt_s);
                }
                Ok(Outcome {
                    out_dir: session.out.clone(),
                    ..Outcome::default()
                })
            }
            Command::Eval | Command::Gradcheck => unreachable!(),
        }
    })();
    match result {
        Err(Error::Halted(step)) => {
            eprintln!(
                "halted at meta-step {step}; continue with --resume {}",
                session.checkpoint_path().display()
            );
            Ok(Outcome {
                out_dir: session.out.clone(),
                halted: true,
                ..Outcome::default()
            })
        }
        other => other,
    }
}

fn eval_checkpoint(ck: &Checkpoint, out: &Path) -> Result<Outcome> {
    let mut rows = Vec::with_capacity(ck.runs.len());
    for run in &ck.runs {
        run.check_against(&run.config)?;
        let (mean, ci) = eval_tasks(&run.trainer, &run.config.eval_set()?)?;
        println!(
            "{} seed {} {} step {}: {mean:.6} ± {ci:.6}",
            run.label, run.seed, run.trial, run.trainer.meta_steps
        );
        rows.push(MetricRow {
            method: run.label.clone(),
            seed: run.seed,
            meta_step: run.trainer.meta_steps,
            mean_mse: mean,
            ci95: ci,
            trial: run.trial.clone(),
            wall_time_s: 0.0,
        });
    }
    write_atomic(&out.join("eval.csv"), metrics_csv(&rows).as_bytes())?;
    Ok(Outcome {
        out_dir: out.to_path_buf(),
        numerical_failure: rows.iter().any(|r| !r.mean_mse.is_finite()),
        rows,
        halted: false,
    })
}

fn layers_of(ps: &[Tensor]) -> Vec<LayerVars> {
    ps.chunks(2)
        .map(|c| LayerVars {
            weight: c[0].clone(),
            bias: c[1].clone(),
        })
        .collect()
}

/// Maximum relative errors of (a) plain gradients of a 1-40-40-1 MLP with an
/// input context and (b) meta-gradients through one inner context step of a
/// 1-4-1 MLP, both against central differences.
pub fn gradcheck_errors(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::new(
        NetworkConfig::mlp(1, &[40, 40], 1),
        ContextSpec::single(2, &["A", "P"]),
    )?;
    let params = arch.init_params(seed);
    let mut rand = |r: usize, c: usize, s: f64| {
        Array::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect())
    };
    let x = Tensor::constant(rand(10, 1, 5.0)?);
    let y = Tensor::constant(rand(10, 1, 5.0)?);
    let mut flat: Vec<Array> = params.arrays().cloned().collect();
    flat.push(rand(1, 2, 1.0)?);
    let n = flat.len();
    let first = finite_diff_check(
        |ps| mse_loss(&arch.forward(&layers_of(&ps[..n - 1]), &ps[n - 1..], &x)?, &y),
        &flat,
        1e-5,
    )?;

    let small = Architecture::new(NetworkConfig::mlp(1, &[4], 1), ContextSpec::single(2, &["A", "P"]))?;
    let family = TaskFamily::sine2();
    let mut sampler = TaskSampler::new(family, RangePartition::full(2), 6, seed);
    let (_, train, test) = sampler.fresh()?;
    let cfg = TrainConfig {
        inner_lr: 0.3,
        inner_decay: 1.0,
        meta_lr: 0.001,
        inner_steps: 1,
        tasks_per_step: 1,
        warmup: 0,
        adapt_sweeps: 1,
        shots: 6,
        recombination: false,
        grad_order: GradOrder::Second,
        optimizer: Default::default(),
        mislabel_rate: 0.0,
    };
    let arrays: Vec<Array> = small.init_params(seed).arrays().cloned().collect();
    let second = finite_diff_check(
        |ps| {
            let tape = ps[0].tape().cloned().unwrap_or_default();
            let layers = layers_of(ps);
            let r = inner_adapt(
                &small,
                &tape,
                &layers,
                &small.zero_contexts().constants(),
                0,
                &train,
                &cfg,
                GradOrder::Second,
                true,
            )?;
            mse_loss(
                &small.forward(&layers, &r.contexts, &Tensor::constant(test.x.clone()))?,
                &Tensor::constant(test.y.clone()),
            )
        },
        &arrays,
        1e-6,
    )?;
    Ok((first, second))
}

/// Parses `args`, runs the command and maps the result to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(o) if o.numerical_failure => {
            eprintln!("error: numerical failure (non-finite loss or gradient check above tolerance)");
            2
        }
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
