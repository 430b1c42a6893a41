//! Dense tensors on a reverse-mode differentiation tape.
//!
//! A [`Graph`] owns a linear tape of nodes; each op appends one node
//! recording its inputs and enough saved state to replay its backward
//! rule. [`Tensor`] is a cheap handle (graph + node index). A graph and
//! its tensors are confined to one thread; independent graphs may run
//! concurrently.
//!
//! Gradient contract: `backward` may be called once per graph; calling
//! it again without [`Graph::zero_grads`] is an error, so gradients are
//! never silently double-counted.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::probe;
use crate::scalar::Element;
use crate::shape;

/// Operation record; the saved fields are exactly what the backward rule
/// replays. Indices refer to earlier nodes on the same tape.
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    Exp { a: usize },
    Tanh { a: usize },
    Gelu { a: usize },
    Sqrt { a: usize },
    Abs { a: usize },
    ClampMin { a: usize, c: T },
    Matmul { a: usize, b: usize, scale: T },
    Reshape { a: usize },
    Transpose { a: usize, ax1: usize, ax2: usize },
    Expand { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

pub(crate) struct GraphInner<T: Element> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    pub(crate) backward_done: Cell<bool>,
}

impl<T: Element> Drop for GraphInner<T> {
    fn drop(&mut self) {
        let nodes = self.nodes.borrow();
        let total: usize = nodes
            .iter()
            .map(|n| n.data.len() + n.grad.as_ref().map_or(0, Vec::len))
            .sum();
        probe::on_free(total);
    }
}

/// Handle to a differentiation tape.
pub struct Graph<T: Element> {
    pub(crate) inner: Rc<GraphInner<T>>,
}

impl<T: Element> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a graph.
pub struct Tensor<T: Element> {
    pub(crate) graph: Graph<T>,
    pub(crate) id: usize,
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { graph: self.graph.clone(), id: self.id }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
                backward_done: Cell::new(false),
            }),
        }
    }

    /// Appends a node; the single allocation funnel, so the probe sees
    /// every graph buffer.
    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Tensor<T> {
        debug_assert_eq!(shape::numel(&shape), data.len());
        probe::on_alloc(data.len());
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Tensor { graph: self.clone(), id: nodes.len() - 1 }
    }

    /// New leaf tensor. With `requires_grad`, `backward` will populate
    /// its gradient.
    pub fn leaf(&self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Tensor<T>> {
        if shape::numel(shape) != data.len() {
            return Err(Error::BadShape {
                op: "leaf",
                detail: format!("shape {shape:?} needs {} values, got {}", shape::numel(shape), data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.leaf(data, shape, false)
    }

    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Tensor<T> {
        self.push(shape.to_vec(), vec![T::zero(); shape::numel(shape)], requires_grad, Op::Leaf)
    }

    pub fn full(&self, shape: &[usize], value: T) -> Tensor<T> {
        self.push(shape.to_vec(), vec![value; shape::numel(shape)], false, Op::Leaf)
    }

    /// Rank-0 constant.
    pub fn scalar(&self, value: T) -> Tensor<T> {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    pub fn node_count(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    /// Total live elements (data + gradients) held by this graph.
    pub fn live_elements(&self) -> usize {
        self.inner
            .nodes
            .borrow()
            .iter()
            .map(|n| n.data.len() + n.grad.as_ref().map_or(0, Vec::len))
            .sum()
    }

    /// Clears every gradient buffer and re-arms `backward`.
    pub fn zero_grads(&self) {
        let mut nodes = self.inner.nodes.borrow_mut();
        for node in nodes.iter_mut() {
            if let Some(g) = node.grad.take() {
                probe::on_free(g.len());
            }
        }
        self.inner.backward_done.set(false);
    }
}

impl<T: Element> Tensor<T> {
    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.nodes.borrow()[self.id].shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.graph.inner.nodes.borrow()[self.id].shape.len()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.nodes.borrow()[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the value out of the graph.
    pub fn to_vec(&self) -> Vec<T> {
        self.graph.inner.nodes.borrow()[self.id].data.clone()
    }

    /// Reads without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.graph.inner.nodes.borrow()[self.id].data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let nodes = self.graph.inner.nodes.borrow();
        debug_assert_eq!(nodes[self.id].data.len(), 1);
        nodes[self.id].data[0]
    }

    /// Copy of the accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.inner.nodes.borrow()[self.id].grad.clone()
    }

    /// The graph this tensor lives on.
    pub fn graph_handle(&self) -> Graph<T> {
        self.graph.clone()
    }

    pub fn same_graph(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.graph.inner, &other.graph.inner)
    }

    pub(crate) fn check_same_graph(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.same_graph(other) {
            Ok(())
        } else {
            Err(Error::GraphMismatch { op })
        }
    }

    /// Reverse-mode sweep from a scalar loss: replays every backward rule
    /// in reverse tape order, populating gradients for each requires-grad
    /// node that the loss depends on, exactly once.
    pub fn backward(&self) -> Result<()> {
        let inner = &self.graph.inner;
        if inner.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        inner.backward_done.set(true);

        let mut nodes = inner.nodes.borrow_mut();
        if nodes[self.id].data.len() != 1 {
            return Err(Error::NotScalar { shape: nodes[self.id].shape.clone() });
        }
        if !nodes[self.id].requires_grad {
            // Loss does not depend on any requires-grad leaf; nothing to do.
            return Ok(());
        }
        probe::on_alloc(1);
        nodes[self.id].grad = Some(vec![T::one()]);

        for i in (0..=self.id).rev() {
            if !nodes[i].requires_grad || nodes[i].grad.is_none() {
                continue;
            }
            let (before, rest) = nodes.split_at_mut(i);
            crate::ops::backward_node(&rest[0], before);
        }
        Ok(())
    }
}

/// Takes (or lazily creates) the gradient buffer of `nodes[id]` for
/// accumulation; pair with [`put_grad`]. Returns `None` when the node
/// does not require gradients.
pub(crate) fn take_grad<T: Element>(nodes: &mut [Node<T>], id: usize) -> Option<Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(nodes[id].grad.take().unwrap_or_else(|| {
        let n = nodes[id].data.len();
        probe::on_alloc(n);
        vec![T::zero(); n]
    }))
}

pub(crate) fn put_grad<T: Element>(nodes: &mut [Node<T>], id: usize, grad: Vec<T>) {
    nodes[id].grad = Some(grad);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_must_match_data() {
        let g: Graph<f64> = Graph::new();
        assert!(g.leaf(vec![1.0, 2.0], &[3], true).is_err());
        let t = g.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        assert_eq!(t.shape(), vec![3]);
        assert_eq!(t.numel(), 3);
    }

    #[test]
    fn backward_requires_scalar() {
        let g: Graph<f64> = Graph::new();
        let t = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        match t.backward() {
            Err(Error::NotScalar { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NotScalar, got {other:?}"),
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let g: Graph<f64> = Graph::new();
        let t = g.leaf(vec![2.0], &[1], true).unwrap();
        let s = t.sum_all().unwrap();
        s.backward().unwrap();
        assert!(matches!(s.backward(), Err(Error::BackwardTwice)));
        g.zero_grads();
        s.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn cross_graph_ops_rejected() {
        let g1: Graph<f64> = Graph::new();
        let g2: Graph<f64> = Graph::new();
        let a = g1.leaf(vec![1.0], &[1], false).unwrap();
        let b = g2.leaf(vec![1.0], &[1], false).unwrap();
        assert!(matches!(a.add(&b), Err(Error::GraphMismatch { .. })));
    }
}
