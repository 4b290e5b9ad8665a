//! Dense n-dimensional tensors with a reverse-mode differentiation tape.
//!
//! `Tensor` is a plain row-major value array. `DiffTensor` is the same data
//! optionally attached to a `Tape` node; every learnable operation in the
//! crate is expressed through `Tape` methods so that one reverse sweep yields
//! exact gradients for all recorded leaves.
//!
//! The tape is single-writer: one logical thread records and replays it.
//! `DiffTensor` values share storage through `Arc` and are safe to read from
//! multiple threads.

mod ops;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Plain row-major value array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", "extents must be positive"));
        }
        if numel_of(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!(
                    "element count {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel_of(shape)],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = numel_of(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Consumes the tensor, returning its raw parts.
    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub idx: usize,
}

/// Tensor value optionally attached to a tape node. Without a node it is a
/// constant: operations on constants alone stay off the tape.
#[derive(Debug, Clone)]
pub struct DiffTensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl DiffTensor {
    pub fn constant(t: Tensor) -> Self {
        let (shape, data) = t.into_parts();
        DiffTensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.as_ref().clone(),
        }
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }
}

/// One recorded operation. Input fields are node indices; aux fields hold
/// whatever the backward pass needs beyond the nodes' stored values.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Abs(usize),
    Matmul(usize, usize),
    DepthwiseConv {
        x: usize,
        k: usize,
        dilation: usize,
    },
    PointwiseConv {
        x: usize,
        w: usize,
        stride: usize,
    },
    Silu(usize),
    Gelu(usize),
    Softplus(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatAxis0(Vec<usize>),
    SliceAxis0 {
        x: usize,
        start: usize,
        len: usize,
    },
    Sum(usize),
    ReduceMax {
        x: usize,
        axis: usize,
        arg: Vec<usize>,
    },
    GatherRows {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    RowConcat(usize, usize),
    SegmentMax {
        x: usize,
        arg: Vec<usize>,
    },
    SegmentMean {
        x: usize,
        group: usize,
    },
    SegmentSum {
        x: usize,
        group: usize,
    },
    Patchify {
        x: usize,
        patch: usize,
    },
    Unpatchify {
        x: usize,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
    },
    RowsToGrid(usize),
    GridToRows(usize),
    UpsampleNearest2(usize),
    ChannelSoftmax(usize),
    Reshape(usize),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub op: Op,
    pub needs_grad: bool,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Ordered record of operations. Construction order is topological by
/// definition, so the backward pass is a single reverse sweep that visits
/// each operation exactly once; fan-out gradients accumulate additively.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a gradient-carrying leaf (e.g. a learnable parameter).
    pub fn leaf(&mut self, t: &Tensor) -> DiffTensor {
        let data = Arc::new(t.data().to_vec());
        self.push_node(t.shape().to_vec(), data, Op::Leaf, true)
    }

    /// Resolves a tensor to a node index, interning constants on demand.
    pub(crate) fn intern(&mut self, t: &DiffTensor) -> Result<usize> {
        match t.node() {
            Some(nr) => {
                if nr.tape != self.id {
                    return Err(Error::TapeMismatch);
                }
                Ok(nr.idx)
            }
            None => {
                let idx = self.nodes.len();
                self.nodes.push(Node {
                    shape: t.shape().to_vec(),
                    data: Arc::clone(&t.data),
                    op: Op::Constant,
                    needs_grad: false,
                });
                Ok(idx)
            }
        }
    }

    pub(crate) fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    pub(crate) fn push_node(
        &mut self,
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        op: Op,
        needs_grad: bool,
    ) -> DiffTensor {
        let idx = self.nodes.len();
        let t = DiffTensor {
            shape: shape.clone(),
            data: Arc::clone(&data),
            node: Some(NodeRef { tape: self.id, idx }),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        t
    }

    /// Records an op whose output depends on the given inputs, or returns a
    /// plain constant when no gradient can flow into it.
    pub(crate) fn record(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<DiffTensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let data = Arc::new(data);
        if needs_grad {
            Ok(self.push_node(shape, data, op, true))
        } else {
            Ok(DiffTensor {
                shape,
                data,
                node: None,
            })
        }
    }

    /// Reverse sweep from a scalar root. Gradients for every recorded node
    /// are retained and can be read back with [`Tape::grad`].
    pub fn backward(&mut self, root: &DiffTensor) -> Result<()> {
        let nr = root.node().ok_or(Error::TapeMismatch)?;
        if nr.tape != self.id {
            return Err(Error::TapeMismatch);
        }
        if root.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got shape {:?}", root.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[nr.idx] = Some(vec![1.0]);
        for idx in (0..=nr.idx).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Some(g) = grads[idx].take() {
                ops::backprop(&self.nodes, idx, &g, &mut grads);
                grads[idx] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `t`. `None` if
    /// no gradient reached it (or `t` is a constant).
    pub fn grad(&self, t: &DiffTensor) -> Option<Tensor> {
        let nr = t.node()?;
        if nr.tape != self.id {
            return None;
        }
        self.grads.get(nr.idx)?.as_ref().map(|g| Tensor {
            shape: t.shape().to_vec(),
            data: g.clone(),
        })
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, numel: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; numel])
}

#[cfg(test)]
mod tests;
