//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! Every operation that has at least one input requiring a gradient records a
//! closure mapping the output gradient to input gradients. [`Tensor::backward`]
//! walks that graph in reverse topological order and accumulates gradients
//! into leaf tensors (parameters and explicitly marked inputs).
//!
//! All kernels run on the calling thread, so results are bitwise
//! reproducible for a given build and input.

mod conv;
mod float;
pub mod gradcheck;
mod loss;
mod ops;
mod param;
pub mod serialize;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

pub use conv::conv2d;
pub use float::Float;
pub use gradcheck::{grad_check, grad_check_at, grad_check_ladder};
pub use param::{init_normal, ParamStore, Parameter, Sgd};

use crate::error::{Error, Result};

/// Logistic function, stable for large magnitudes.
pub fn sigmoid_f64(x: f64) -> f64 {
    ops::sigmoid(x)
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording backward closures on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Maps the gradient of an op's output to gradients of each of its parents.
/// `None` marks a parent that does not need a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Float> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Shared handle to a dense row-major array of up to four axes.
///
/// Cloning is cheap and aliases the same storage.
pub struct Tensor<T: Float = f32> {
    node: Arc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
        return Err(Error::InvalidShape {
            op: "tensor",
            shape: shape.to_vec(),
            reason: "expected 1 to 4 positive extents".into(),
        });
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// A constant tensor (no gradient).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != numel(shape) {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// A leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Self::build(t.to_vec(), shape.to_vec(), true, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| T::lit(x)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self::build(vec![value; numel(shape)], shape.to_vec(), false, None))
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    /// Builds the output of a custom differentiable operation.
    ///
    /// The backward closure is only retained when some parent requires a
    /// gradient; it must return one entry per parent.
    pub fn from_op(data: Vec<T>, shape: &[usize], parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != numel(shape) {
            return Err(Error::InvalidShape {
                op: "from_op",
                shape: shape.to_vec(),
                reason: format!("data length {} does not match", data.len()),
            });
        }
        let requires_grad = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn { parents, backward });
        Ok(Self::build(data, shape.to_vec(), requires_grad, grad_fn))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Mutable access to the storage; used by optimizers and finite differencing.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.node.data.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                shape: self.shape().to_vec(),
                reason: "expected a single element".into(),
            });
        }
        Ok(self.data()[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad_lock().clone()
    }

    fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<T>>> {
        self.node.grad.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_grad(&self, grad: Option<Vec<T>>) {
        *self.grad_lock() = grad;
    }

    pub fn zero_grad(&self) {
        let n = self.numel();
        *self.grad_lock() = Some(vec![T::zero(); n]);
    }

    /// A constant copy sharing no graph history.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Self::from_op(self.to_vec(), shape, vec![self.clone()], Box::new(|g| vec![Some(g.to_vec())]))
    }

    /// Propagates gradients from this single-element tensor to every leaf
    /// that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.shape().to_vec(),
                reason: "backward needs a single-element output".into(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.grad_lock();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require gradients, parents before children.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
