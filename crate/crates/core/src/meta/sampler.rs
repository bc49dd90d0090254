use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ContextSpec;
use crate::tasks::{sample_shots, sample_split, RangePartition, SineTask, TaskDataset, TaskFamily};

/// Task factors owned by each context slot. Factors no slot claims are
/// `free`: they are redrawn with every conditional sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorGroups {
    pub groups: Vec<Vec<usize>>,
    pub free: Vec<usize>,
}

impl FactorGroups {
    pub fn new(spec: &ContextSpec, family: &TaskFamily) -> Result<Self> {
        let mut owned = vec![false; family.len()];
        let mut groups = Vec::with_capacity(spec.k());
        for (i, slot) in spec.slots.iter().enumerate() {
            let mut g = Vec::with_capacity(slot.factors.len());
            for name in &slot.factors {
                let idx = family.index_of(name).ok_or_else(|| {
                    Error::config(
                        format!("contexts.slots[{i}].factors"),
                        format!("unknown factor `{name}`"),
                    )
                })?;
                if owned[idx] {
                    return Err(Error::config(
                        format!("contexts.slots[{i}].factors"),
                        format!("factor `{name}` is claimed by two contexts"),
                    ));
                }
                owned[idx] = true;
                g.push(idx);
            }
            g.sort_unstable();
            groups.push(g);
        }
        let free = (0..family.len()).filter(|&i| !owned[i]).collect();
        Ok(Self { groups, free })
    }

    /// Factor indices redrawn when the task label is `label`, ascending.
    pub fn changing(&self, label: usize) -> Vec<usize> {
        let mut c = self.groups[label].clone();
        c.extend(&self.free);
        c.sort_unstable();
        c
    }
}

/// Owns the random stream for task and shot sampling during training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSampler {
    pub family: TaskFamily,
    pub partition: RangePartition,
    pub shots: usize,
    pub rng: ChaCha8Rng,
}

impl TaskSampler {
    pub fn new(family: TaskFamily, partition: RangePartition, shots: usize, seed: u64) -> Self {
        Self {
            family,
            partition,
            shots,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A task from the unconditional distribution with train and test shots.
    pub fn fresh(&mut self) -> Result<(SineTask, TaskDataset, TaskDataset)> {
        let task = self.family.sample_task(&self.partition, &mut self.rng)?;
        let (train, test) = sample_split(&task, self.shots, &mut self.rng)?;
        Ok((task, train, test))
    }

    /// A task differing from `prev` only in `changing`, with train and test shots.
    pub fn conditional(
        &mut self,
        prev: &SineTask,
        changing: &[usize],
    ) -> Result<(SineTask, TaskDataset, TaskDataset)> {
        let task = self
            .family
            .sample_conditional(prev, changing, &self.partition, &mut self.rng)?;
        let (train, test) = sample_split(&task, self.shots, &mut self.rng)?;
        Ok((task, train, test))
    }

    pub fn shots_for(&mut self, task: &SineTask) -> Result<TaskDataset> {
        sample_shots(task, self.shots, &mut self.rng)
    }
}

/// Where training tasks come from. [`TaskSampler`] is the production source;
/// tests substitute scripted sources.
pub trait TaskSource {
    fn family(&self) -> &TaskFamily;

    fn fresh(&mut self) -> Result<(SineTask, TaskDataset, TaskDataset)>;

    fn conditional(
        &mut self,
        prev: &SineTask,
        changing: &[usize],
    ) -> Result<(SineTask, TaskDataset, TaskDataset)>;

    /// Test shots for a composed task.
    fn shots_for(&mut self, task: &SineTask) -> Result<TaskDataset>;

    /// Label actually used to pick the changing factors when the model adapts
    /// context `s` of `k`.
    fn label(&mut self, s: usize, rate: f64, k: usize) -> Result<usize>;
}

impl TaskSource for TaskSampler {
    fn family(&self) -> &TaskFamily {
        &self.family
    }

    fn fresh(&mut self) -> Result<(SineTask, TaskDataset, TaskDataset)> {
        TaskSampler::fresh(self)
    }

    fn conditional(
        &mut self,
        prev: &SineTask,
        changing: &[usize],
    ) -> Result<(SineTask, TaskDataset, TaskDataset)> {
        TaskSampler::conditional(self, prev, changing)
    }

    fn shots_for(&mut self, task: &SineTask) -> Result<TaskDataset> {
        TaskSampler::shots_for(self, task)
    }

    fn label(&mut self, s: usize, rate: f64, k: usize) -> Result<usize> {
        crate::tasks::mislabel(s, rate, k, &mut self.rng)
    }
}
