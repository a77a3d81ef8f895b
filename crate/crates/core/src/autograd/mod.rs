//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with a closure that maps the output gradient to input gradients. One graph
//! serves one forward/backward pass and lives on a single thread.

mod conv;
mod elementwise;
mod loss;
mod matrix;
mod norm;
mod sample;
mod spatial;

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tensor::{Elem, Tensor};

pub use conv::{conv_out_size, ConvSpec};
pub use loss::PROB_FLOOR;
pub use matrix::{concat0, concat_cols};
pub use norm::BatchStats;
pub use sample::{ms_deform_sample, LevelShape};
pub use spatial::{concat_batch, concat_channels};

pub(crate) use loss::focal_term;
pub(crate) use matrix::softmax_in_place;
pub(crate) use sample::bilinear_taps;

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Elem> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<T: Elem = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    flops: Cell<u64>,
    sample_reads: Cell<u64>,
}

/// Handle to a value recorded in a [`Graph`].
pub struct Var<'g, T: Elem = f64> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Elem> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Elem> Copy for Var<'_, T> {}

impl<T: Elem> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            flops: Cell::new(0),
            sample_reads: Cell::new(0),
        }
    }

    /// A graph that only evaluates values; nothing is kept for backward.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Floating point operations executed so far (multiply-adds count as two).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Feature-map corner reads performed by deformable sampling so far.
    pub fn sample_reads(&self) -> u64 {
        self.sample_reads.get()
    }

    pub(crate) fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    pub(crate) fn add_sample_reads(&self, n: u64) {
        self.sample_reads.set(self.sample_reads.get() + n);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), false)
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            requires_grad: requires_grad && self.grad_enabled,
        })
    }

    /// Record an operation output. `back` receives the output gradient and a
    /// mask of which parents need a gradient.
    pub(crate) fn op<'g>(
        &'g self,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        back: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let (parents, back): (Vec<usize>, Option<BackFn<T>>) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(back)))
        } else {
            (Vec::new(), None)
        };
        self.push(Node {
            value: Arc::new(value),
            parents,
            back,
            requires_grad,
        })
    }

    /// Reverse pass from a scalar (or any-shaped, seeded with ones) root.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Grads { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(back) = &node.back else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let pgrads = back(&g, &mask);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(pgrads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients of leaf variables after [`Graph::backward`].
pub struct Grads<T: Elem> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of `v`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'g, T: Elem> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.value().dims4()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.value().dims2()
    }

    /// Same data, new shape.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape)?;
        Ok(self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&old).expect("same element count"))]
        }))
    }
}

pub(crate) fn same_shape<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}
