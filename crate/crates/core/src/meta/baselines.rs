use crate::autodiff::{grad, Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{mse_loss, Architecture, ParamSet};
use crate::tasks::{SineTask, TaskDataset};

use super::inner::{inner_adapt, weight_steps};
use super::optim::OptimizerState;
use super::{Method, MetaStepReport, TrainConfig};

/// One independently sampled task with its support and query shots.
#[derive(Clone, Debug)]
pub struct BatchTask {
    pub task: SineTask,
    pub train: TaskDataset,
    pub test: TaskDataset,
}

/// Layers adapted in the inner loop by a weight-based method.
pub(crate) fn adapted_layers(method: Method, num_layers: usize) -> Vec<bool> {
    match method {
        Method::Anil => (0..num_layers).map(|l| l + 1 == num_layers).collect(),
        _ => vec![true; num_layers],
    }
}

/// One meta-update of MAML, ANIL or CAVIA over a batch of independent tasks.
/// The meta loss is the mean query loss after adaptation.
pub fn baseline_meta_step(
    method: Method,
    arch: &Architecture,
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    batch: &[BatchTask],
    cfg: &TrainConfig,
) -> Result<MetaStepReport> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::config("train.tasks_per_step", "empty batch"));
    }
    match method {
        Method::Dmcm => {
            return Err(Error::config("method", "dmcm has its own meta-step"));
        }
        Method::Cavia if arch.contexts.k() != 1 => {
            return Err(Error::config(
                "contexts",
                format!("cavia uses one context, got {}", arch.contexts.k()),
            ));
        }
        _ => {}
    }
    let weight = 1.0 / batch.len() as f64;
    let tape = Tape::new();
    let layers = params.leaves(&tape);
    let zero_ctx = arch.zero_contexts().constants();
    let adapt = adapted_layers(method, layers.len());
    let mut total: Option<Tensor> = None;
    let mut report = MetaStepReport::default();

    for bt in batch {
        let x = Tensor::constant(bt.test.x.clone());
        let y = Tensor::constant(bt.test.y.clone());
        let (pred, losses) = if method == Method::Cavia {
            let r = inner_adapt(arch, &tape, &layers, &zero_ctx, 0, &bt.train, cfg, cfg.grad_order, true)?;
            (arch.forward(&layers, &r.contexts, &x)?, r.losses)
        } else {
            let (adapted, losses) =
                weight_steps(arch, &layers, &zero_ctx, &adapt, &bt.train, cfg, cfg.grad_order)?;
            (arch.forward(&adapted, &zero_ctx, &x)?, losses)
        };
        report
            .inner_losses
            .push(losses.last().copied().unwrap_or(f64::NAN));
        let loss = mse_loss(&pred, &y)?.scale(weight)?;
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss)?,
        });
    }

    let total = total.expect("non-empty batch");
    report.basic_loss = total.item();
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
    Ok(report)
}
