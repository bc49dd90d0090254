use crate::autodiff::{grad, Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{mse_loss, Architecture, ContextBank, LayerVars, ParamSet};
use crate::tasks::TaskDataset;

use super::{GradOrder, TrainConfig};

pub struct InnerResult {
    pub contexts: Vec<Tensor>,
    /// Training loss seen by each inner step, before its update.
    pub losses: Vec<f64>,
}

fn data_tensors(data: &TaskDataset) -> (Tensor, Tensor) {
    (
        Tensor::constant(data.x.clone()),
        Tensor::constant(data.y.clone()),
    )
}

/// Gradient steps on context `s` only: φˢ ← φˢ − αₜ∇φˢ L with αₜ = α·decayᵗ.
///
/// With `reset`, φˢ starts from zero; otherwise from its current value. Every
/// other context is passed through untouched. Under [`GradOrder::Second`] the
/// updates stay on the tape, so the adapted context remains a differentiable
/// function of the network parameters.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    arch: &Architecture,
    tape: &Tape,
    layers: &[LayerVars],
    contexts: &[Tensor],
    s: usize,
    data: &TaskDataset,
    cfg: &TrainConfig,
    order: GradOrder,
    reset: bool,
) -> Result<InnerResult> {
    if s >= contexts.len() {
        return Err(Error::shape(
            "inner_adapt",
            format!("context {s} of {}", contexts.len()),
        ));
    }
    let (x, y) = data_tensors(data);
    let mut ctx = contexts.to_vec();
    let start = if reset {
        Array::zeros(ctx[s].shape())
    } else {
        ctx[s].to_array()
    };
    ctx[s] = tape.leaf(start);
    let create_graph = order == GradOrder::Second;
    let mut losses = Vec::with_capacity(cfg.inner_steps);
    for t in 0..cfg.inner_steps {
        let loss = mse_loss(&arch.forward(layers, &ctx, &x)?, &y)?;
        losses.push(loss.item());
        let g = grad(&loss, &[&ctx[s]], create_graph)?.remove(0);
        let step = g.scale(cfg.inner_rate(t))?;
        ctx[s] = if create_graph {
            ctx[s].sub(&step)?
        } else {
            tape.leaf(ctx[s].value().zip_map(step.value(), |a, b| a - b))
        };
    }
    Ok(InnerResult {
        contexts: ctx,
        losses,
    })
}

/// Gradient steps on the weights of the layers selected by `adapt`. Under
/// first order the step direction is detached but the update itself stays on
/// the tape, so adapted weights keep an identity path back to the originals.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_steps(
    arch: &Architecture,
    layers: &[LayerVars],
    contexts: &[Tensor],
    adapt: &[bool],
    data: &TaskDataset,
    cfg: &TrainConfig,
    order: GradOrder,
) -> Result<(Vec<LayerVars>, Vec<f64>)> {
    let (x, y) = data_tensors(data);
    let create_graph = order == GradOrder::Second;
    let mut current = layers.to_vec();
    let mut losses = Vec::with_capacity(cfg.inner_steps);
    for t in 0..cfg.inner_steps {
        let loss = mse_loss(&arch.forward(&current, contexts, &x)?, &y)?;
        losses.push(loss.item());
        let wrt: Vec<&Tensor> = current
            .iter()
            .zip(adapt)
            .filter(|(_, &a)| a)
            .flat_map(|(l, _)| l.both())
            .collect();
        let grads = grad(&loss, &wrt, create_graph)?;
        let rate = cfg.inner_rate(t);
        let mut gi = grads.into_iter();
        let mut next = Vec::with_capacity(current.len());
        for (l, &a) in current.iter().zip(adapt) {
            if !a {
                next.push(l.clone());
                continue;
            }
            let gw = gi.next().unwrap().scale(rate)?;
            let gb = gi.next().unwrap().scale(rate)?;
            next.push(LayerVars {
                weight: l.weight.sub(&gw)?,
                bias: l.bias.sub(&gb)?,
            });
        }
        current = next;
    }
    Ok((current, losses))
}

/// Test-time adaptation of plain weights (MAML: every layer, ANIL: the head).
pub fn adapt_weights(
    arch: &Architecture,
    params: &ParamSet,
    adapt: &[bool],
    data: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    let tape = Tape::new();
    let layers: Vec<LayerVars> = params
        .layers
        .iter()
        .zip(adapt)
        .map(|(l, &a)| {
            if a {
                LayerVars {
                    weight: tape.leaf(l.weight.clone()),
                    bias: tape.leaf(l.bias.clone()),
                }
            } else {
                LayerVars {
                    weight: Tensor::constant(l.weight.clone()),
                    bias: Tensor::constant(l.bias.clone()),
                }
            }
        })
        .collect();
    let (adapted, _) = weight_steps(
        arch,
        &layers,
        &ContextBank::zeros(&arch.contexts).constants(),
        adapt,
        data,
        cfg,
        GradOrder::First,
    )?;
    Ok(ParamSet {
        layers: adapted.iter().map(LayerVars::to_params).collect(),
    })
}

/// Sequential test-time adaptation: `sweeps` passes, each adapting contexts
/// `0..K` in order on their own dataset. Contexts start at zero and are not
/// reset between sweeps.
pub fn adapt_test(
    arch: &Architecture,
    params: &ParamSet,
    datasets: &[&TaskDataset],
    cfg: &TrainConfig,
    sweeps: usize,
) -> Result<ContextBank> {
    let k = arch.contexts.k();
    if datasets.len() != k {
        return Err(Error::shape(
            "adapt_test",
            format!("{} datasets for {k} contexts", datasets.len()),
        ));
    }
    let layers = params.constants();
    let mut ctx = ContextBank::zeros(&arch.contexts).constants();
    for sweep in 0..sweeps {
        for (s, data) in datasets.iter().enumerate() {
            let tape = Tape::new();
            let r = inner_adapt(
                arch,
                &tape,
                &layers,
                &ctx,
                s,
                data,
                cfg,
                GradOrder::First,
                sweep == 0,
            )?;
            ctx = r.contexts.iter().map(Tensor::detach).collect();
        }
    }
    Ok(ContextBank::from_tensors(&ctx))
}

/// Builds a bank whose vector `k` is copied from the source tagged `k`.
/// Exactly one source per context index is required.
pub fn compose_zero_shot(sources: &[(&ContextBank, usize)]) -> Result<ContextBank> {
    let k = sources.len();
    let mut slots: Vec<Option<Array>> = vec![None; k];
    for (bank, idx) in sources {
        if *idx >= k || bank.k() != k {
            return Err(Error::config(
                "compose",
                format!("factor {idx} does not fit {k} contexts"),
            ));
        }
        if slots[*idx].is_some() {
            return Err(Error::config("compose", format!("factor {idx} given twice")));
        }
        slots[*idx] = Some(bank.vectors[*idx].clone());
    }
    let vectors = slots
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::config("compose", format!("factor {i} missing"))))
        .collect::<Result<_>>()?;
    Ok(ContextBank { vectors })
}
