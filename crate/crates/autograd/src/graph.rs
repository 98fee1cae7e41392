use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutogradError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Write access to the gradient buffers of a node's parents during backward.
pub struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> GradSink<'_, T> {
    /// Mutable gradient buffer for `v`, allocated as zeros on first use.
    /// Returns `None` when `v` does not need a gradient.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut self.grads[v.0];
        Some(slot.get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Tape of operations. Nodes are appended in creation order, which is a
/// valid topological order for the backward sweep.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
    grad_enabled: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            grad_enabled: Cell::new(true),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Stops recording backward closures; later ops are forward-only.
    pub fn disable_grad(&self) {
        self.grad_enabled.set(false);
    }

    pub(crate) fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled.get(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.leaf(value.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.leaf(value.into(), false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation with forward `value` computed from `parents`.
    ///
    /// `backward` receives the gradient of the new node and must add the
    /// vector-Jacobian product into each parent via [`GradSink::grad_mut`].
    /// It is dropped unused when no parent requires a gradient.
    pub fn custom(
        &self,
        op: &'static str,
        parents: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutogradError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.grad_enabled.get() && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.len() != 1 {
            return Err(AutogradError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let g = Tensor::new(nodes[id].value.shape(), g)?;
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward(&g, &mut sink);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.and_then(|g| {
                    let node = &nodes[id];
                    // Interior nodes were consumed above; what remains are leaves.
                    if node.backward.is_none() {
                        Tensor::new(node.value.shape(), g).ok()
                    } else {
                        None
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}
