//! Minimal dense-tensor math with reverse-mode gradients.
//!
//! Tensors are immutable once built.  Every operation records its parents
//! and a backward closure; [`Tensor::backward`] walks the resulting DAG in
//! reverse topological order, visiting each node exactly once and summing
//! gradient contributions where a tensor feeds several consumers.
//!
//! Storage is generic over [`Scalar`] (`f32` in production, `f64` in the
//! verification suites).  Dot products and reductions always accumulate in
//! f64, and op ordering is deterministic, so repeated runs are bit-equal.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

mod gradcheck;
mod ops;

pub use gradcheck::{corrupted_control, grad_check, grad_check_multi};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward closure: given the gradient w.r.t. this node's output, return
/// one optional gradient buffer per parent (None when the parent does not
/// require grad).
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>>>;

struct Node<E: Scalar> {
    id: u64,
    dims: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// Dense row-major tensor with an attached autograd record.
///
/// Cloning is cheap (reference counted).  Graphs are single-threaded;
/// distinct graphs share no mutable state and may run concurrently.
#[derive(Clone)]
pub struct Tensor<E: Scalar> {
    inner: Rc<Node<E>>,
}

impl<E: Scalar> Tensor<E> {
    fn make(
        dims: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Self {
        let numel: usize = dims.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            dims,
            numel,
            data.len()
        );
        debug_assert!(
            data.iter().all(|v| !(v.to_f64().is_nan())),
            "NaN produced in tensor of shape {:?}",
            dims
        );
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                dims,
                data,
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf (not differentiated through).
    pub fn from_vec(dims: &[usize], data: Vec<E>) -> Self {
        Self::make(dims.to_vec(), data, false, vec![], None)
    }

    /// Trainable leaf; [`Tensor::backward`] reports a gradient for it.
    pub fn param(dims: &[usize], data: Vec<E>) -> Self {
        Self::make(dims.to_vec(), data, true, vec![], None)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self::from_vec(dims, vec![E::ZERO; n])
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_vec(dims, vec![E::from_f64(value); n])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![E::ZERO; n * n];
        for i in 0..n {
            data[i * n + i] = E::ONE;
        }
        Self::from_vec(&[n, n], data)
    }

    /// Gaussian leaf, N(0, std^2), deterministic under the supplied rng.
    pub fn randn<R: Rng>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                E::from_f64(z * std)
            })
            .collect();
        Self::from_vec(dims, data)
    }

    pub(crate) fn from_op(
        dims: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::make(dims, data, true, parents, Some(backward))
        } else {
            // Dead branch for autograd: keep the value, drop the graph.
            Self::make(dims, data, false, vec![], None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.inner.dims.len(), 2, "expected rank-2, got {:?}", self.inner.dims);
        (self.inner.dims[0], self.inner.dims[1])
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> E {
        assert_eq!(self.len(), 1, "expected scalar, got shape {:?}", self.dims());
        self.inner.data[0]
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Traverses each reachable grad-requiring node exactly once and
    /// accumulates contributions additively when a node fans out.
    pub fn backward(&self) -> Gradients<E> {
        assert_eq!(self.len(), 1, "backward requires a scalar output, got {:?}", self.dims());
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }
        grads.insert(self.id(), vec![E::ONE]);

        for node in self.topo_order() {
            let Some(backward) = node.inner.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads.get(&node.id()).cloned() else {
                continue;
            };
            let contributions = backward(&grad_out);
            assert_eq!(contributions.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                assert_eq!(contrib.len(), parent.len());
                let slot = grads
                    .entry(parent.id())
                    .or_insert_with(|| vec![E::ZERO; parent.len()]);
                for (s, c) in slot.iter_mut().zip(contrib) {
                    *s += c;
                }
            }
        }
        Gradients { grads }
    }

    /// Reverse topological order (consumers before producers), restricted
    /// to the grad-requiring subgraph.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut state: HashMap<u64, bool> = HashMap::new(); // false=open, true=done
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        state.insert(self.id(), false);

        while let Some((node, child)) = stack.pop() {
            let parents = &node.inner.parents;
            let mut advanced = false;
            for idx in child..parents.len() {
                let p = &parents[idx];
                if !p.requires_grad() || state.contains_key(&p.id()) {
                    continue;
                }
                state.insert(p.id(), false);
                stack.push((node.clone(), idx + 1));
                stack.push((p.clone(), 0));
                advanced = true;
                break;
            }
            if !advanced {
                state.insert(node.id(), true);
                order.push(node);
            }
        }
        order.reverse();
        order
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.inner.dims)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Gradient buffers produced by one backward sweep, keyed by tensor id.
pub struct Gradients<E: Scalar> {
    grads: HashMap<u64, Vec<E>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient w.r.t. `t`, if `t` was reachable from the output.
    pub fn wrt(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }
}
