use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::{Architecture, ContextBank, ParamSet};
use crate::tasks::{RangePartition, TaskDataset, TaskFamily};

use super::baselines::{adapted_layers, baseline_meta_step, BatchTask};
use super::dmcm::{dmcm_meta_step, ChainState};
use super::inner::{adapt_test, adapt_weights, compose_zero_shot};
use super::optim::OptimizerState;
use super::sampler::{FactorGroups, TaskSampler};
use super::{Method, MetaStepReport, TrainConfig};

/// Result of test-time adaptation.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapted {
    Contexts(ContextBank),
    Weights(ParamSet),
}

/// Full training state of one run. Serializing it captures everything needed
/// to resume bit-exactly, the random streams included.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub method: Method,
    pub arch: Architecture,
    pub cfg: TrainConfig,
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    pub sampler: TaskSampler,
    pub groups: FactorGroups,
    pub chain: ChainState,
    pub meta_steps: u64,
}

impl Trainer {
    pub fn new(
        method: Method,
        arch: Architecture,
        cfg: TrainConfig,
        family: TaskFamily,
        partition: RangePartition,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        family.validate()?;
        partition.validate()?;
        if partition.intervals.len() != family.len() {
            return Err(Error::config(
                "partition.intervals",
                format!("{} entries for {} factors", partition.intervals.len(), family.len()),
            ));
        }
        let k = arch.contexts.k();
        match method {
            Method::Maml | Method::Anil if k != 0 => {
                return Err(Error::config("contexts", format!("{method} takes no contexts")));
            }
            Method::Cavia if k != 1 => {
                return Err(Error::config("contexts", "cavia takes exactly one context"));
            }
            Method::Dmcm if k == 0 => {
                return Err(Error::config("contexts", "dmcm needs at least one context"));
            }
            _ => {}
        }
        let groups = FactorGroups::new(&arch.contexts, &family)?;
        let params = arch.init_params(seed);
        let mut sampler = TaskSampler::new(family, partition, cfg.shots, seed);
        sampler.rng.set_stream(1);
        let chain = ChainState::new(&arch);
        Ok(Self {
            method,
            arch,
            cfg,
            params,
            optimizer: OptimizerState::default(),
            sampler,
            groups,
            chain,
            meta_steps: 0,
        })
    }

    pub fn step(&mut self) -> Result<MetaStepReport> {
        let report = if self.method == Method::Dmcm {
            dmcm_meta_step(
                &self.arch,
                &mut self.params,
                &mut self.optimizer,
                &mut self.chain,
                &self.groups,
                &self.cfg,
                &mut self.sampler,
            )?
        } else {
            let batch = (0..self.cfg.tasks_per_step)
                .map(|_| {
                    let (task, train, test) = self.sampler.fresh()?;
                    Ok(BatchTask { task, train, test })
                })
                .collect::<Result<Vec<_>>>()?;
            baseline_meta_step(
                self.method,
                &self.arch,
                &mut self.params,
                &mut self.optimizer,
                &batch,
                &self.cfg,
            )?
        };
        self.meta_steps += 1;
        Ok(report)
    }

    /// Adapts to a single task whose support set is `data`.
    pub fn adapt(&self, data: &TaskDataset) -> Result<Adapted> {
        let k = self.arch.contexts.k().max(1);
        self.adapt_each(&vec![data; k])
    }

    /// Adapts context `s` on `datasets[s]`. Only DMCM accepts distinct sets;
    /// other methods take a single dataset.
    pub fn adapt_each(&self, datasets: &[&TaskDataset]) -> Result<Adapted> {
        match self.method {
            Method::Dmcm => adapt_test(
                &self.arch,
                &self.params,
                datasets,
                &self.cfg,
                self.cfg.adapt_sweeps,
            )
            .map(Adapted::Contexts),
            Method::Cavia => {
                adapt_test(&self.arch, &self.params, datasets, &self.cfg, 1).map(Adapted::Contexts)
            }
            Method::Maml | Method::Anil => {
                let [data] = datasets else {
                    return Err(Error::shape(
                        "adapt",
                        format!("{} datasets for a weight-based method", datasets.len()),
                    ));
                };
                let adapt = adapted_layers(self.method, self.arch.num_layers());
                adapt_weights(&self.arch, &self.params, &adapt, data, &self.cfg)
                    .map(Adapted::Weights)
            }
        }
    }

    /// Zero-shot composition: self-adapts to each source task separately and
    /// keeps context `s` from source `s`. No step is taken on the target.
    pub fn compose(&self, sources: &[&TaskDataset]) -> Result<Adapted> {
        if self.method != Method::Dmcm {
            return Err(Error::config("method", "zero-shot composition needs dmcm"));
        }
        let banks = sources
            .iter()
            .map(|d| match self.adapt(d)? {
                Adapted::Contexts(b) => Ok(b),
                Adapted::Weights(_) => unreachable!("dmcm adapts contexts"),
            })
            .collect::<Result<Vec<ContextBank>>>()?;
        let tagged: Vec<(&ContextBank, usize)> = banks.iter().zip(0..).collect();
        compose_zero_shot(&tagged).map(Adapted::Contexts)
    }

    pub fn predict(&self, adapted: &Adapted, x: &Array) -> Result<Array> {
        match adapted {
            Adapted::Contexts(bank) => self.arch.predict(&self.params, bank, x),
            Adapted::Weights(p) => self.arch.predict(p, &self.arch.zero_contexts(), x),
        }
    }
}
