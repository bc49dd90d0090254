use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{mse_loss, Architecture, ContextBank, ParamSet};
use crate::tasks::SineTask;

use super::inner::inner_adapt;
use super::optim::OptimizerState;
use super::sampler::{FactorGroups, TaskSource};
use super::{MetaStepReport, TrainConfig};

/// One stored adaptation of a context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub vector: Array,
    /// Task the vector was adapted on.
    pub task: SineTask,
    /// Position of that task in the never-reset chain.
    pub task_index: u64,
}

/// Per-context history of adapted vectors, most recent first, `K` deep.
///
/// Index 0 of factor `f` mirrors the live bank entry, so only `(K - 1) * K`
/// vectors are kept beyond the bank itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecombinationBuffer {
    depth: usize,
    per_factor: Vec<VecDeque<BufferEntry>>,
}

impl RecombinationBuffer {
    pub fn new(k: usize) -> Self {
        Self {
            depth: k,
            per_factor: vec![VecDeque::with_capacity(k); k],
        }
    }

    pub fn push(&mut self, factor: usize, entry: BufferEntry) {
        let q = &mut self.per_factor[factor];
        q.push_front(entry);
        q.truncate(self.depth);
    }

    /// The adaptation of `factor` made `back` adaptations of it ago.
    pub fn get(&self, factor: usize, back: usize) -> Option<&BufferEntry> {
        self.per_factor.get(factor)?.get(back)
    }

    pub fn len(&self) -> usize {
        self.per_factor.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which vectors one recombination term used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadRecord {
    /// Chain index of the task whose fresh context was kept.
    pub task_index: u64,
    pub factor: usize,
    /// `(factor, chain index of its source task)` for every loaded vector.
    pub sources: Vec<(usize, u64)>,
}

impl LoadRecord {
    /// Chain distance between this task and each loaded source.
    pub fn ages(&self) -> Vec<u64> {
        self.sources.iter().map(|&(_, j)| self.task_index - j).collect()
    }
}

/// Everything that survives from one meta-step to the next. Contexts are not
/// reset between steps; they are detached from the previous step's graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub prev_task: Option<SineTask>,
    pub cursor: usize,
    pub bank: ContextBank,
    pub buffer: RecombinationBuffer,
    pub tasks_seen: u64,
}

impl ChainState {
    pub fn new(arch: &Architecture) -> Self {
        Self {
            prev_task: None,
            cursor: 0,
            bank: arch.zero_contexts(),
            buffer: RecombinationBuffer::new(arch.contexts.k()),
            tasks_seen: 0,
        }
    }
}

fn accumulate(acc: Option<Tensor>, term: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        None => term,
        Some(a) => a.add(&term)?,
    }))
}

/// One DMCM meta-update over a chain of `tasks_per_step` tasks.
///
/// Task `i` adapts context `s = cursor` from zero on a task that differs from
/// its predecessor in the factor group of `s` (or of a mislabelled group).
/// Tasks past the warm-up add their test loss, and optionally a recombination
/// loss on a composed task, weighted by `1 / (N - B)`.
#[allow(clippy::too_many_arguments)]
pub fn dmcm_meta_step<S: TaskSource + ?Sized>(
    arch: &Architecture,
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    chain: &mut ChainState,
    groups: &FactorGroups,
    cfg: &TrainConfig,
    source: &mut S,
) -> Result<MetaStepReport> {
    cfg.validate()?;
    let k = arch.contexts.k();
    if k == 0 || chain.bank.k() != k || groups.groups.len() != k {
        return Err(Error::config(
            "contexts",
            format!("DMCM needs matching context counts, got {k}"),
        ));
    }
    let n = cfg.tasks_per_step;
    let weight = 1.0 / (n - cfg.warmup) as f64;
    let tape = Tape::new();
    let layers = params.leaves(&tape);
    let mut ctx = chain.bank.constants();
    // Vectors adapted during this step, still attached to the graph.
    let mut live: HashMap<u64, Tensor> = HashMap::new();
    let mut basic: Option<Tensor> = None;
    let mut recomb: Option<Tensor> = None;
    let mut report = MetaStepReport::default();
    let mut prev = chain.prev_task.take();

    for i in 0..n {
        let s = chain.cursor;
        let (task, train, test) = match (i, &prev) {
            (0, _) | (_, None) => source.fresh()?,
            (_, Some(p)) => {
                let label = source.label(s, cfg.mislabel_rate, k)?;
                source.conditional(p, &groups.changing(label))?
            }
        };
        let r = inner_adapt(arch, &tape, &layers, &ctx, s, &train, cfg, cfg.grad_order, true)?;
        ctx = r.contexts;
        let index = chain.tasks_seen;

        if i >= cfg.warmup {
            report
                .inner_losses
                .push(r.losses.last().copied().unwrap_or(f64::NAN));
            let x = Tensor::constant(test.x.clone());
            let y = Tensor::constant(test.y.clone());
            let loss = mse_loss(&arch.forward(&layers, &ctx, &x)?, &y)?.scale(weight)?;
            basic = accumulate(basic, loss)?;

            if cfg.recombination && k > 1 {
                let mut composed = ctx.clone();
                let mut values = task.values.clone();
                let mut sources = Vec::with_capacity(k - 1);
                for m in 1..k {
                    let f = (s + k - m) % k;
                    let Some(e) = chain.buffer.get(f, m) else {
                        break;
                    };
                    composed[f] = live
                        .get(&e.task_index)
                        .cloned()
                        .unwrap_or_else(|| Tensor::constant(e.vector.clone()));
                    for &fi in &groups.groups[f] {
                        values[fi] = e.task.values[fi];
                    }
                    sources.push((f, e.task_index));
                }
                if sources.len() == k - 1 {
                    let target = source.family().task(values)?;
                    let shots = source.shots_for(&target)?;
                    let x = Tensor::constant(shots.x);
                    let y = Tensor::constant(shots.y);
                    let loss =
                        mse_loss(&arch.forward(&layers, &composed, &x)?, &y)?.scale(weight)?;
                    recomb = accumulate(recomb, loss)?;
                    report.recombination_used += 1;
                    report.loads.push(LoadRecord {
                        task_index: index,
                        factor: s,
                        sources,
                    });
                } else {
                    report.recombination_skipped += 1;
                }
            }
        }

        chain.buffer.push(
            s,
            BufferEntry {
                vector: ctx[s].to_array(),
                task: task.clone(),
                task_index: index,
            },
        );
        live.insert(index, ctx[s].clone());
        chain.cursor = (s + 1) % k;
        chain.tasks_seen += 1;
        prev = Some(task);
    }

    let basic = basic.expect("warm-up is smaller than the chain");
    report.basic_loss = basic.item();
    let total = match recomb {
        Some(r) => {
            report.recombination_loss = r.item();
            basic.add(&r)?
        }
        None => basic,
    };
    let wrt: Vec<&Tensor> = layers.iter().flat_map(|l| l.both()).collect();
    let grads: Vec<Array> = grad(&total, &wrt, false)?
        .iter()
        .map(Tensor::to_array)
        .collect();
    report.grad_norm = grads.iter().map(Array::norm_sq).sum::<f64>().sqrt();
    if !report.grad_norm.is_finite() {
        return Err(Error::NonFinite { op: "meta-gradient" });
    }
    opt.apply(&cfg.optimizer, cfg.meta_lr, params, &grads)?;

    chain.bank = ContextBank::from_tensors(&ctx);
    chain.prev_task = prev;
    Ok(report)
}
