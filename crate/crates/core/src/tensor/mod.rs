//! Dense tensors on a reverse-mode differentiation tape.
//!
//! A [`Graph`] records every executed operation in topological order.
//! Forward ops append nodes; [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients into every node that transitively
//! depends on a `requires_grad` leaf. Buffers are row-major contiguous.
//!
//! The element type is generic: training runs `Graph<f32>`, gradient
//! verification runs `Graph<f64>` (see [`gradcheck`]).

mod backward;
pub mod gradcheck;
mod ops;
mod scalar;


pub use scalar::Scalar;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward expects a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor id {id} is not attached to this graph (len {len})")]
    Detached { id: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    AddBroadcast { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    /// Elementwise `mul * x + add` with compile-time constants.
    /// `add` is recorded for the op log even though backward needs only `mul`.
    Affine {
        x: TensorId,
        mul: f64,
        #[allow(dead_code)]
        add: f64,
    },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    Sigmoid { x: TensorId },
    Softplus { x: TensorId },
    Transpose { x: TensorId },
    /// Swap the last two axes of a rank-3 tensor.
    TransposeBatched { x: TensorId },
    Reshape { x: TensorId },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize, len: usize },
    /// Row gather: `out[i, ..] = table[indices[i], ..]`.
    EmbeddingLookup { table: TensorId, indices: Arc<Vec<usize>> },
    /// Multi-head scaled dot-product attention over frame-local token
    /// blocks: `q`, `k`, `v` are `[frames * tokens, dim]`.
    Attention { q: TensorId, k: TensorId, v: TensorId, heads: usize, frames: usize },
    SoftmaxLast { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Conv2d { x: TensorId, w: TensorId, bias: Option<TensorId>, stride: usize, padding: usize },
    Upsample2x { x: TensorId },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) grad: Option<Vec<T>>,
    /// True iff this node transitively depends on a `requires_grad` leaf.
    pub(crate) needs_grad: bool,
    pub(crate) op: Op,
}

/// Reverse-mode tape. One graph per training step or forward pass.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    /// Leaves bound from a [`ParamStore`], for gradient collection.
    param_leaves: Vec<(ParamId, TensorId)>,
    /// When set, the named op applies a deliberately wrong backward rule.
    /// Verification harness only: negative control for gradient checks.
    corrupt_backward: Option<String>,
    /// Present only during training forward passes; drives dropout masks.
    step_rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            corrupt_backward: None,
            step_rng: None,
        }
    }

    /// Install (or clear) the RNG that stochastic forward ops draw from.
    /// A graph without one runs in evaluation mode: dropout is identity.
    pub fn set_step_rng(&mut self, rng: Option<ChaCha8Rng>) {
        self.step_rng = rng;
    }

    /// Inverted-dropout mask constant: `1/(1-p)` with probability `1-p`,
    /// else 0. Returns `None` in evaluation mode.
    pub fn dropout_mask(&mut self, shape: Vec<usize>, p: f64) -> Result<Option<TensorId>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("p {p} not in [0,1)"),
            });
        }
        let Some(rng) = self.step_rng.as_mut() else {
            return Ok(None);
        };
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n: usize = shape.iter().product();
        let data: Vec<T> =
            (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        Ok(Some(self.push(Arc::new(data), shape, false, Op::Leaf)))
    }

    /// Route the named op ("gelu", "sigmoid", ...) through a corrupted
    /// backward rule. Used as the negative control in `gradcheck`.
    pub fn set_corrupt_backward(&mut self, op: Option<&str>) {
        self.corrupt_backward = op.map(str::to_owned);
    }

    pub(crate) fn corrupted(&self, op: &str) -> bool {
        self.corrupt_backward.as_deref() == Some(op)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_shape(data_len: usize, shape: &[usize], op: &'static str) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument {
                op,
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data_len {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("shape {shape:?} has {numel} elements, buffer has {data_len}"),
            });
        }
        Ok(())
    }

    /// New leaf with an explicit `requires_grad` flag.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        Self::check_shape(data.len(), &shape, "leaf")?;
        Ok(self.push(Arc::new(data), shape, requires_grad, Op::Leaf))
    }

    /// Constant leaf (no gradient ever accumulates).
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.push(Arc::new(vec![v]), vec![1], false, Op::Leaf)
    }

    /// Bind a stored parameter as a leaf. The buffer is shared, not copied.
    pub fn param(&mut self, store: &ParamStore<T>, pid: ParamId) -> TensorId {
        let entry = store.entry(pid);
        let id = self.push(
            Arc::clone(&entry.data),
            entry.shape.clone(),
            entry.requires_grad,
            Op::Leaf,
        );
        self.param_leaves.push((pid, id));
        id
    }

    pub(crate) fn push(
        &mut self,
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: Op,
    ) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, grad: None, needs_grad, op });
        id
    }

    pub(crate) fn node(&self, id: TensorId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Accumulated gradient, if this node participated in a backward pass.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// `(param, leaf)` pairs bound via [`Graph::param`], in binding order.
    pub fn param_leaves(&self) -> &[(ParamId, TensorId)] {
        &self.param_leaves
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self, id: TensorId) -> T {
        let d = self.data(id);
        assert_eq!(d.len(), 1, "item() on tensor of {} elements", d.len());
        d[0]
    }
}

/// Split `shape` around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
