//! f64 tensors with reverse-mode automatic differentiation.
//!
//! Each differentiable op produces a node holding its parent handles and a
//! backward closure (the vector-Jacobian product). A training step therefore
//! builds a small DAG that is dropped — and its memory freed — as soon as the
//! step's tensors go out of scope. Values are immutable after construction;
//! only gradient buffers mutate, via accumulation during [`Tensor::backward`].
//!
//! Everything is plain `f64` on the CPU: at desk scale, exactness and
//! debuggability beat throughput, and f64 keeps finite-difference checks and
//! bit-exact checkpoint round-trips honest.

mod gradcheck;
mod ops;
mod rng;

pub use gradcheck::{finite_diff_grad, max_rel_err};
pub use ops::embed_mean_pool;
pub use rng::Rng;

use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient recording disabled: ops executed inside produce
/// plain value tensors with no parents, so no graph memory is retained.
/// Used by evaluation forwards and by finite-difference probes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD.with(|c| {
        let prev = c.replace(true);
        let out = f();
        c.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Backward closure: receives (grad wrt output, output values) and accumulates
/// into the parent tensors it captured at construction.
type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// True for trainable leaves; gradients are retained here after backward.
    requires_grad: bool,
    /// True if a gradient must flow through this node (itself or an ancestor
    /// requires grad). Nodes with `needs_grad == false` are never traversed.
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// Parent handles, kept solely so the topological sort can reach them.
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Cheap-to-clone handle to an immutable value buffer plus autodiff metadata.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_values(shape: &[usize], values: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != values.len() {
        return Err(Error::ShapeMismatch {
            op: "tensor construction",
            detail: format!("shape {:?} implies {} values, got {}", shape, numel, values.len()),
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: format!("tensor construction at flat index {i}") });
    }
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                requires_grad,
                needs_grad: requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant leaf. Rejects shape/value-count mismatch and non-finite values.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_values(shape, &values)?;
        Ok(Tensor::leaf(shape.to_vec(), values, false))
    }

    /// Trainable leaf: participates in backward and retains its gradient.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_values(shape, &values)?;
        Ok(Tensor::leaf(shape.to_vec(), values, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    /// Rank-0 constant.
    pub fn scalar(v: f64) -> Tensor {
        debug_assert!(v.is_finite());
        Tensor::leaf(Vec::new(), vec![v], false)
    }

    /// Internal constructor for op outputs. Falls back to a plain leaf when
    /// recording is off or no parent needs a gradient, so evaluation forwards
    /// never retain graph memory.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[f64]) + 'static,
    ) -> Tensor {
        let record = grad_enabled() && parents.iter().any(|p| p.inner.needs_grad);
        if !record {
            return Tensor::leaf(shape, values, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                requires_grad: false,
                needs_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(Box::new(backward)),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    /// Value of a one-element tensor. Panics on misuse (programming error).
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar_value on shape {:?}", self.shape());
        self.inner.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Adds `delta` into this tensor's gradient buffer (no-op for nodes that
    /// do not need gradients — this is what makes stop-gradient boundaries
    /// and constant inputs free).
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.needs_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. After it returns, every
    /// gradient-requiring tensor reachable from `self` holds dL/dtensor.
    /// Tensors behind a stop-gradient boundary keep an absent gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar { shape: self.shape().to_vec() });
        }
        if !self.inner.needs_grad {
            return Ok(()); // loss is constant wrt everything; nothing to do
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.backward {
                let guard = node.inner.grad.borrow();
                if let Some(g) = guard.as_ref() {
                    back(g, &node.inner.values);
                }
            }
        }
        Ok(())
    }
}

/// Iterative postorder over the parent DAG (no recursion: graphs are shallow
/// but batch loops should not gamble on stack depth). Nodes that do not need
/// gradients are pruned together with their ancestors.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(root.id());
    stack.push((root.clone(), 0));
    while let Some((node, pi)) = stack.pop() {
        if pi < node.inner.parents.len() {
            let parent = node.inner.parents[pi].clone();
            stack.push((node, pi + 1));
            if parent.inner.needs_grad && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Integer token batch: `rows` sequences of `cols` token ids, padded with the
/// pad id. Dense row-major storage, no gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Result<TokenMatrix> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                op: "token matrix construction",
                detail: format!("{rows}x{cols} needs {} ids, got {}", rows * cols, data.len()),
            });
        }
        Ok(TokenMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<u32>], cols: usize, pad_id: u32) -> TokenMatrix {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            for j in 0..cols {
                data.push(row.get(j).copied().unwrap_or(pad_id));
            }
        }
        TokenMatrix { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }
}
