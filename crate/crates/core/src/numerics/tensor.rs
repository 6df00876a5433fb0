use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use super::Element;
use crate::error::{Result, StoicError};

/// Gradient rule of a recorded op: given the upstream gradient and a mask of which
/// parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>> + Send + Sync>;

struct GradFn<E: Element> {
    name: &'static str,
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
    grad_fn: Option<GradFn<E>>,
}

/// Dense row-major n-dimensional array with optional reverse-mode gradient tracking.
///
/// Tensors are immutable once built; cloning is a reference-count bump. Ops on tensors
/// that require a gradient record a backward rule, and [`Tensor::backward`] on a scalar
/// accumulates `∂loss/∂leaf` into the `grad` slot of every reachable leaf that requires
/// a gradient. Intermediate gradients are transient and not retained.
pub struct Tensor<E: Element = f32> {
    node: Arc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.node.shape);
        s.field("requires_grad", &self.node.requires_grad);
        if let Some(g) = &self.node.grad_fn {
            s.field("op", &g.name);
        }
        if self.numel() <= 16 {
            s.field("data", &self.node.data);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn leaf(shape: Vec<usize>, data: Arc<Vec<E>>, requires_grad: bool) -> Self {
        Tensor {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: None,
            }),
        }
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(StoicError::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {} values, got {}",
                    numel_of(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::leaf(shape.to_vec(), Arc::new(data), false))
    }

    /// Trainable leaf.
    pub fn parameter(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::leaf(
            shape.to_vec(),
            Arc::new(vec![value; numel_of(shape)]),
            false,
        )
    }

    pub fn scalar(value: E) -> Self {
        Self::leaf(Vec::new(), Arc::new(vec![value]), false)
    }

    pub fn from_f64_slice(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&v| E::from_f64(v)).collect(), shape)
    }

    /// New leaf sharing this tensor's values, detached from any graph.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(
            self.node.shape.clone(),
            Arc::clone(&self.node.data),
            requires_grad,
        )
    }

    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    /// Records an op result. When no parent needs a gradient the rule is dropped and the
    /// result is a plain constant.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "{name}: output size");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward,
        });
        Tensor {
            node: Arc::new(Node {
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// View with a new shape over the same storage.
    pub(crate) fn share_with_shape(
        &self,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name: "reshape",
            parents,
            backward,
        });
        Tensor {
            node: Arc::new(Node {
                shape,
                data: Arc::clone(&self.node.data),
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(StoicError::shape(
                "item",
                format!("expected one element, shape {:?}", self.shape()),
            ));
        }
        Ok(self.node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Pointer identity, stable for the lifetime of the node.
    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.node) as usize
    }

    pub fn same_storage(&self, other: &Tensor<E>) -> bool {
        Arc::ptr_eq(&self.node.data, &other.node.data)
    }

    /// Errors if any value is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.node.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(StoicError::NonFinite { op })
        }
    }

    /// Reverse pass from a scalar. Repeated calls without [`Tensor::zero_grad`] accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(StoicError::shape(
                "backward",
                format!("loss must be scalar, shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> = f.parents.iter().map(|p| p.requires_grad()).collect();
                    let parent_grads = (f.backward)(&g, &needs);
                    debug_assert_eq!(
                        parent_grads.len(),
                        f.parents.len(),
                        "{}: gradient arity",
                        f.name
                    );
                    for ((p, pg), need) in f.parents.iter().zip(parent_grads).zip(&needs) {
                        let (Some(pg), true) = (pg, *need) else {
                            continue;
                        };
                        debug_assert_eq!(pg.len(), p.numel(), "{}: gradient size", f.name);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.node.grad_fn {
                for p in f.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
