//! Reverse sweep over the tape.
//!
//! Gradient rules are expressed with the same differentiable primitives as the
//! forward pass. With `create_graph` set, operands are re-attached to the tape
//! so the returned gradients are themselves differentiable; otherwise every
//! operand is detached and the sweep records nothing.

use std::collections::BTreeMap;

use super::array::Array;
use super::tape::{Op, ParamId, Src, Tape, Tensor};
use crate::error::{Error, Result};

/// Gradients keyed by parameter node.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: BTreeMap<ParamId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    /// Gradient for a parameter tensor; panics if it was not requested.
    pub fn of(&self, param: &Tensor) -> &Tensor {
        let id = param.id().expect("parameter has no graph node");
        &self.entries[&id]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.entries.iter()
    }
}

/// First-order gradients of a scalar loss. Results carry no graph.
pub fn backward(loss: &Tensor, wrt: &[&Tensor]) -> Result<GradMap> {
    to_map(wrt, grad(loss, wrt, false)?)
}

/// Differentiates a tensor that was itself produced by a graph-retaining
/// gradient call. Non-scalar inputs are summed first. The results keep their
/// graph, so a further level of differentiation is possible.
pub fn higher_order_backward(grad_tensor: &Tensor, wrt: &[&Tensor]) -> Result<GradMap> {
    let Some(tape) = grad_tensor.tape() else {
        return Err(Error::GraphNotRetained);
    };
    if wrt
        .iter()
        .any(|w| w.tape().is_none_or(|t| !t.same(tape)))
    {
        return Err(Error::DisjointWrt);
    }
    let target = if grad_tensor.value().is_scalar() {
        grad_tensor.clone()
    } else {
        grad_tensor.sum()?
    };
    to_map(wrt, grad(&target, wrt, true)?)
}

fn to_map(wrt: &[&Tensor], grads: Vec<Tensor>) -> Result<GradMap> {
    let mut entries = BTreeMap::new();
    for (w, g) in wrt.iter().zip(grads) {
        entries.insert(w.id().ok_or(Error::DisjointWrt)?, g);
    }
    Ok(GradMap { entries })
}

/// Core reverse sweep: gradients of `loss` with respect to each tensor in
/// `wrt`, in order. Parameters the loss does not depend on get zeros.
pub fn grad(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if !loss.value().is_scalar() {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    if wrt.is_empty() {
        return Err(Error::EmptyWrt);
    }
    let zeros = |w: &Tensor| Tensor::constant(Array::zeros(w.shape()));

    let Some(loss_node) = &loss.node else {
        // a constant loss: every parameter must still live on some tape
        if wrt.iter().any(|w| w.node.is_none()) {
            return Err(Error::DisjointWrt);
        }
        return Ok(wrt.iter().map(|w| zeros(w)).collect());
    };
    let tape = loss_node.tape.clone();
    let root = loss_node.id;

    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for w in wrt {
        match &w.node {
            Some(n) if n.tape.same(&tape) => wrt_ids.push(n.id),
            _ => return Err(Error::DisjointWrt),
        }
    }

    // Only nodes at or after the earliest requested parameter can lie on a
    // path from it, so every per-node table is offset by `base`.
    let base = *wrt_ids.iter().min().unwrap();
    if base > root {
        return Ok(wrt.iter().map(|w| zeros(w)).collect());
    }
    let span = root + 1 - base;
    let mut needs = vec![false; span];
    for &id in &wrt_ids {
        if id <= root {
            needs[id - base] = true;
        }
    }
    {
        let nodes = tape.inner.nodes.borrow();
        for id in base..=root {
            if needs[id - base] {
                continue;
            }
            needs[id - base] = nodes[id]
                .op
                .sources()
                .iter()
                .any(|s| s.node().is_some_and(|p| p >= base && needs[p - base]));
        }
    }

    let mut adjoint: Vec<Option<Tensor>> = vec![None; span];
    if needs[root - base] {
        adjoint[root - base] = Some(Tensor::constant(Array::full(loss.shape(), 1.0)));
    }
    let mut is_wrt = vec![false; span];
    for &id in &wrt_ids {
        if id <= root {
            is_wrt[id - base] = true;
        }
    }

    let ctx = Ctx {
        tape: &tape,
        attach: create_graph,
        needs: &needs,
        base,
    };
    for id in (base..=root).rev() {
        let i = id - base;
        if !needs[i] {
            continue;
        }
        let g = if is_wrt[i] {
            adjoint[i].clone()
        } else {
            adjoint[i].take()
        };
        let Some(g) = g else { continue };
        let op = tape.inner.nodes.borrow()[id].op.clone();
        if matches!(op, Op::Leaf) {
            continue;
        }
        for (parent, contribution) in ctx.rule(&op, &g)? {
            let slot = &mut adjoint[parent - base];
            *slot = Some(match slot.take() {
                None => contribution,
                Some(acc) => acc.add(&contribution)?,
            });
        }
    }

    Ok(wrt_ids
        .iter()
        .zip(wrt)
        .map(|(&id, w)| {
            let g = if id <= root { adjoint[id - base].clone() } else { None };
            match g {
                Some(g) if create_graph => g,
                Some(g) => g.detach(),
                None => zeros(w),
            }
        })
        .collect())
}

struct Ctx<'a> {
    tape: &'a Tape,
    attach: bool,
    needs: &'a [bool],
    base: usize,
}

impl Ctx<'_> {
    fn operand(&self, s: &Src) -> Tensor {
        match s {
            Src::Node(id) => self.tape.tensor(*id, self.attach),
            Src::Const(v) => Tensor {
                value: v.clone(),
                node: None,
            },
        }
    }

    fn wants(&self, s: &Src) -> Option<usize> {
        s.node()
            .filter(|&p| p >= self.base && self.needs[p - self.base])
    }

    /// Contributions `(parent node, gradient)` of one node's adjoint.
    fn rule(&self, op: &Op, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let g = if self.attach { g.clone() } else { g.detach() };
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.clone()));
                }
                if let Some(p) = self.wants(b) {
                    out.push((p, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.clone()));
                }
                if let Some(p) = self.wants(b) {
                    out.push((p, g.neg()?));
                }
            }
            Op::Mul(a, b) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.mul(&self.operand(b))?));
                }
                if let Some(p) = self.wants(b) {
                    out.push((p, g.mul(&self.operand(a))?));
                }
            }
            Op::Scale(a, c) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.scale(*c)?));
                }
            }
            Op::AddRow(a, b) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.clone()));
                }
                if let Some(p) = self.wants(b) {
                    out.push((p, g.sum_rows()?));
                }
            }
            Op::BroadcastRows(a) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.sum_rows()?));
                }
            }
            Op::SumRows(a) => {
                if let Some(p) = self.wants(a) {
                    let n = self.operand(a).value().rows();
                    out.push((p, g.broadcast_rows(n)?));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let wa = self.wants(a);
                let wb = self.wants(b);
                if let Some(p) = wa {
                    let bv = self.operand(b);
                    let ga = match (ta, tb) {
                        (false, false) => g.matmul_t(&bv, false, true)?,
                        (false, true) => g.matmul_t(&bv, false, false)?,
                        (true, false) => bv.matmul_t(&g, false, true)?,
                        (true, true) => bv.matmul_t(&g, true, true)?,
                    };
                    out.push((p, ga));
                }
                if let Some(p) = wb {
                    let av = self.operand(a);
                    let gb = match (ta, tb) {
                        (false, false) => av.matmul_t(&g, true, false)?,
                        (false, true) => g.matmul_t(&av, true, false)?,
                        (true, false) => av.matmul_t(&g, false, false)?,
                        (true, true) => g.matmul_t(&av, true, true)?,
                    };
                    out.push((p, gb));
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for s in parts {
                    let width = self.operand(s).value().cols();
                    if let Some(p) = self.wants(s) {
                        out.push((p, g.slice_cols(start, width)?));
                    }
                    start += width;
                }
            }
            Op::SliceCols { a, start } => {
                if let Some(p) = self.wants(a) {
                    let total = self.operand(a).value().cols();
                    out.push((p, g.pad_cols(*start, total)?));
                }
            }
            Op::PadCols { a, start, .. } => {
                if let Some(p) = self.wants(a) {
                    let width = self.operand(a).value().cols();
                    out.push((p, g.slice_cols(*start, width)?));
                }
            }
            Op::Relu(a) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.relu_mask(&self.operand(a))?));
                }
            }
            Op::ReluMask { g: gs, x } => {
                // the mask is piecewise constant in x, so x receives nothing
                if let Some(p) = self.wants(gs) {
                    out.push((p, g.relu_mask(&self.operand(x))?));
                }
            }
            Op::Sin(a) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.mul(&self.operand(a).cos()?)?));
                }
            }
            Op::Cos(a) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.mul(&self.operand(a).sin()?)?.neg()?));
                }
            }
            Op::Square(a) => {
                if let Some(p) = self.wants(a) {
                    out.push((p, g.mul(&self.operand(a))?.scale(2.0)?));
                }
            }
            Op::Sum(a) => {
                if let Some(p) = self.wants(a) {
                    let shape = self.operand(a).shape().to_vec();
                    out.push((p, g.expand(&shape)?));
                }
            }
            Op::Expand(a) => {
                if let Some(p) = self.wants(a) {
                    let target = self.operand(a).shape().to_vec();
                    out.push((p, g.sum()?.expand(&target)?));
                }
            }
        }
        Ok(out)
    }
}
