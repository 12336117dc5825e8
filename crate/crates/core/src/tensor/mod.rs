//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Tensors are immutable, reference-counted nodes. An operation executed while
//! gradient recording is enabled (see [`no_grad`]) and with at least one input
//! that requires a gradient records a backward closure; [`Tensor::backward`]
//! walks the recorded graph in reverse topological order.
//!
//! Everything is double precision. Results are bitwise reproducible for equal
//! inputs on the same machine: no operation depends on thread scheduling.

mod deform;
mod linalg;
mod ops;
mod shape;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub use deform::{deform_conv2d, TAPS};
pub use linalg::{conv2d, Conv2dSpec};
pub use ops::{normal_cdf, normal_pdf};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with gradient recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradModeGuard(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Receives the output gradient and a per-parent "needs gradient" mask.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Arc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn: None,
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::leaf(Arc::new(data), shape.to_vec(), false)
    }

    /// A trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::leaf(Arc::new(data), shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![value], &[])
    }

    /// Records an operation node. Falls back to a constant when recording is
    /// disabled or no parent needs a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        assert_eq!(data.len(), numel(&shape), "op output does not match shape {shape:?}");
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::leaf(Arc::new(data), shape, false);
        }
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            requires_grad: true,
            grad_fn: Some(GradFn {
                parents,
                backward: Box::new(backward),
            }),
        }))
    }

    /// Same as [`Tensor::from_op`] but shares an existing buffer (views).
    pub(crate) fn from_op_shared(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::leaf(data, shape, false);
        }
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: true,
            grad_fn: Some(GradFn {
                parents,
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Shares storage, drops history.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.data_arc(), self.shape().to_vec(), false)
    }

    /// A fresh trainable leaf with this tensor's values.
    pub fn to_param(&self) -> Tensor {
        Self::leaf(self.data_arc(), self.shape().to_vec(), true)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar output. Returns gradients of every leaf
    /// that requires one.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar output, got {:?}", self.shape());
        self.backward_with(vec![1.0])
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.numel());
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }
        let order = self.topo_order();
        grads.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(gf) = node.0.grad_fn.as_ref() else {
                continue;
            };
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = (gf.backward)(&g, &needs);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match grads.get_mut(&parent.id()) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = node.0.grad_fn.as_ref() {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Leaf gradients produced by [`Tensor::backward`].
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, or zeros when `t` did not influence the output.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
