use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::Array;
use crate::error::{Error, Result};

/// Operand of a recorded operation: either another node on the same tape or
/// a constant captured by value.
#[derive(Clone)]
pub(crate) enum Src {
    Node(usize),
    Const(Rc<Array>),
}

impl Src {
    pub(crate) fn node(&self) -> Option<usize> {
        match self {
            Src::Node(id) => Some(*id),
            Src::Const(_) => None,
        }
    }
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Src, Src),
    Sub(Src, Src),
    Mul(Src, Src),
    Scale(Src, f64),
    /// `(n, m) + (1, m)`, the row added to every row.
    AddRow(Src, Src),
    /// `(1, m)` repeated into `(n, m)`.
    BroadcastRows(Src),
    /// `(n, m)` summed over rows into `(1, m)`.
    SumRows(Src),
    MatMul {
        a: Src,
        b: Src,
        ta: bool,
        tb: bool,
    },
    ConcatCols(Vec<Src>),
    SliceCols {
        a: Src,
        start: usize,
    },
    PadCols {
        a: Src,
        start: usize,
    },
    Relu(Src),
    /// Passes `g` where `x > 0`; `x` enters only through its sign.
    ReluMask {
        g: Src,
        x: Src,
    },
    Sin(Src),
    Cos(Src),
    Square(Src),
    Sum(Src),
    Expand(Src),
}

impl Op {
    pub(crate) fn sources(&self) -> Vec<&Src> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::ReluMask { g, x } => vec![g, x],
            Op::ConcatCols(parts) => parts.iter().collect(),
            Op::Scale(a, _)
            | Op::BroadcastRows(a)
            | Op::SumRows(a)
            | Op::SliceCols { a, .. }
            | Op::PadCols { a, .. }
            | Op::Relu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Expand(a) => vec![a],
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Rc<Array>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Record of operations. Every tensor derived from a leaf of this tape is
/// appended to it, including tensors produced while differentiating with
/// `create_graph`, so gradients can themselves be differentiated.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) inner: Rc<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Array) -> Tensor {
        let value = Rc::new(value);
        let id = self.push(Op::Leaf, value.clone());
        Tensor {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, op: Op, value: Rc<Array>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { op, value });
        nodes.len() - 1
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn tensor(&self, id: usize, attach: bool) -> Tensor {
        let value = self.inner.nodes.borrow()[id].value.clone();
        Tensor {
            value,
            node: attach.then(|| NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// Identifier of a graph node, used to key gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A value that may participate in a differentiation graph.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) value: Rc<Array>,
    pub(crate) node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|n| n.id))
            .field("values", &self.value.data())
            .finish()
    }
}

impl Tensor {
    /// A tensor outside any graph.
    pub fn constant(value: Array) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn to_array(&self) -> Array {
        (*self.value).clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn id(&self) -> Option<ParamId> {
        self.node.as_ref().map(|n| ParamId(n.id))
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            value: self.value.clone(),
            node: None,
        }
    }

    pub(crate) fn src(&self) -> Src {
        match &self.node {
            Some(n) => Src::Node(n.id),
            None => Src::Const(self.value.clone()),
        }
    }
}

/// Finalizes an op: checks finiteness and records the node when any input is
/// attached to a tape.
pub(crate) fn record(
    name: &'static str,
    value: Array,
    inputs: &[&Tensor],
    make_op: impl FnOnce(Vec<Src>) -> Op,
) -> Result<Tensor> {
    if !value.is_finite() {
        return Err(Error::NonFinite { op: name });
    }
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(existing) if !existing.same(&n.tape) => {
                    return Err(Error::shape(name, "operands recorded on different tapes"));
                }
                Some(_) => {}
            }
        }
    }
    let value = Rc::new(value);
    let Some(tape) = tape else {
        return Ok(Tensor { value, node: None });
    };
    let srcs = inputs.iter().map(|t| t.src()).collect();
    let id = tape.push(make_op(srcs), value.clone());
    Ok(Tensor {
        value,
        node: Some(NodeRef {
            tape: tape.clone(),
            id,
        }),
    })
}
