//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure computing the vector-Jacobian product. Parameters live outside the
//! graph as [`Param`]s and are registered per step with [`Graph::param`];
//! after [`Graph::backward`] their gradients are read from [`Gradients`].
//!
//! A graph is built fresh for every forward pass and dropped afterwards.

mod check;
mod conv;
mod nn;

#[cfg(test)]
mod gradcheck;

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use check::gradient_error;
pub use conv::ConvSpec;

/// Vector-Jacobian product: receives the output gradient and, per parent,
/// whether that parent needs a gradient.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Arc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor owned by a network block.
///
/// Cloning yields an independent parameter with a fresh identity, so a copied
/// block never aliases the gradients of its source.
#[derive(Debug)]
pub struct Param<S> {
    id: ParamId,
    name: String,
    value: Arc<Tensor<S>>,
    trainable: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self { id: ParamId::fresh(), name: name.into(), value: Arc::new(value), trainable: true }
    }

    /// Non-trainable state such as running statistics.
    pub fn buffer(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self { trainable: false, ..Self::new(name, value) }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor<S>) {
        self.value = Arc::new(value);
    }
}

impl<S> Clone for Param<S> {
    fn clone(&self) -> Self {
        Self { id: ParamId::fresh(), name: self.name.clone(), value: self.value.clone(), trainable: self.trainable }
    }
}

pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    param_leaves: RefCell<Vec<(ParamId, usize)>>,
    params_trainable: Cell<bool>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(Vec::new()),
            params_trainable: Cell::new(true),
        }
    }

    fn push_node(&self, value: Tensor<S>, parents: Vec<usize>, backward: Option<BackwardFn<S>>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), parents, backward, requires_grad });
        nodes.len() - 1
    }

    /// Records a derived value. The backward closure is discarded when no
    /// parent needs a gradient.
    pub(crate) fn record<'g>(&'g self, value: Tensor<S>, parents: &[Var<'g, S>], backward: BackwardFn<S>) -> Var<'g, S> {
        let ids: Vec<usize> = parents.iter().map(|v| v.id).collect();
        let requires = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = if requires {
            self.push_node(value, ids, Some(backward), true)
        } else {
            self.push_node(value, Vec::new(), None, false)
        };
        Var { graph: self, id }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push_node(value, Vec::new(), None, false);
        Var { graph: self, id }
    }

    /// A leaf that receives a gradient (used for input sensitivities).
    pub fn variable(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push_node(value, Vec::new(), None, true);
        Var { graph: self, id }
    }

    /// Registers a parameter. Inside [`Graph::frozen`] it enters as a constant.
    pub fn param(&self, p: &Param<S>) -> Var<'_, S> {
        let trainable = self.params_trainable.get();
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { value: p.value.clone(), parents: Vec::new(), backward: None, requires_grad: trainable });
            nodes.len() - 1
        };
        if trainable {
            self.param_leaves.borrow_mut().push((p.id, id));
        }
        Var { graph: self, id }
    }

    /// Runs `f` with parameter registration treated as constant.
    pub fn frozen<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.params_trainable.replace(false);
        let out = f();
        self.params_trainable.set(prev);
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_, S>) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; output.id + 1];
        if nodes[output.id].requires_grad {
            grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), S::one()));
        }
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads, param_leaves: self.param_leaves.borrow().clone() }
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    param_leaves: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter summed over every registration in the graph.
    pub fn param(&self, p: &Param<S>) -> Option<Tensor<S>> {
        let mut out: Option<Tensor<S>> = None;
        for &(pid, node) in &self.param_leaves {
            if pid != p.id {
                continue;
            }
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_ref()) {
                match &mut out {
                    Some(acc) => acc.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn unary<'g, S: Scalar>(x: Var<'g, S>, f: impl Fn(S) -> S, df: impl Fn(S, S) -> S + 'static) -> Var<'g, S> {
    // df(input, output) -> local derivative
    let xv = x.value();
    let out = xv.map(f);
    let outv = Arc::new(out.clone());
    x.graph.record(
        out,
        &[x],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(outv.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        }),
    )
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<S>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> S {
        self.value().item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, S> {
        self.graph.constant((*self.value()).clone())
    }

    fn same_shape(&self, other: &Var<'g, S>, op: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch");
    }

    pub fn add(self, other: Var<'g, S>) -> Var<'g, S> {
        self.same_shape(&other, "add");
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.record(out, &[self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g, S>) -> Var<'g, S> {
        self.same_shape(&other, "sub");
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.record(out, &[self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(self, other: Var<'g, S>) -> Var<'g, S> {
        self.same_shape(&other, "mul");
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.record(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                    needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(self, k: S) -> Var<'g, S> {
        unary(self, move |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(self, k: S) -> Var<'g, S> {
        unary(self, move |v| v + k, |_, _| S::one())
    }

    pub fn neg(self) -> Var<'g, S> {
        self.scale(-S::one())
    }

    pub fn square(self) -> Var<'g, S> {
        let two = S::from_f64_lossy(2.0);
        unary(self, |v| v * v, move |x, _| two * x)
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(self) -> Var<'g, S> {
        unary(self, |v| v.abs(), |x, _| {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        })
    }

    pub fn ln(self) -> Var<'g, S> {
        unary(self, |v| v.ln(), |x, _| S::one() / x)
    }

    pub fn exp(self) -> Var<'g, S> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn sigmoid(self) -> Var<'g, S> {
        unary(self, sigmoid, |_, y| y * (S::one() - y))
    }

    pub fn tanh(self) -> Var<'g, S> {
        unary(self, |v| v.tanh(), |_, y| S::one() - y * y)
    }

    pub fn relu(self) -> Var<'g, S> {
        unary(self, |v| v.max(S::zero()), |x, _| if x > S::zero() { S::one() } else { S::zero() })
    }

    pub fn leaky_relu(self, slope: S) -> Var<'g, S> {
        unary(
            self,
            move |v| if v > S::zero() { v } else { v * slope },
            move |x, _| if x > S::zero() { S::one() } else { slope },
        )
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(self, lo: S, hi: S) -> Var<'g, S> {
        unary(self, move |v| v.max(lo).min(hi), move |x, _| if x < lo || x > hi { S::zero() } else { S::one() })
    }

    pub fn sum(self) -> Var<'g, S> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.graph.record(
            Tensor::scalar(v.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g, S> {
        let n = S::from_usize(self.value().numel().max(1)).unwrap();
        self.sum().scale(S::one() / n)
    }

    /// Mean over every axis but the first: `(N, ...) -> (N)`.
    pub fn mean_rows(self) -> Var<'g, S> {
        let v = self.value();
        let (n, r) = (v.rows(), v.row_len());
        let shape = v.shape().to_vec();
        let inv = S::one() / S::from_usize(r.max(1)).unwrap();
        let data = v.data().chunks(r).map(|c| c.iter().copied().sum::<S>() * inv).collect();
        self.graph.record(
            Tensor::from_vec(&[n], data).unwrap(),
            &[self],
            Box::new(move |g, _| {
                let mut out = Vec::with_capacity(n * r);
                for &gi in g.data() {
                    out.extend(std::iter::repeat(gi * inv).take(r));
                }
                vec![Some(Tensor::from_vec(&shape, out).unwrap())]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, S> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape).expect("reshape");
        self.graph.record(out, &[self], Box::new(move |g, _| vec![Some(g.clone().reshape(&old).unwrap())]))
    }

    /// Rows picked along the leading axis (indices may repeat).
    pub fn gather_rows(self, index: &[usize]) -> Var<'g, S> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let r = v.row_len();
        let index = index.to_vec();
        let out = v.gather_rows(&index);
        self.graph.record(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for (k, &i) in index.iter().enumerate() {
                    for (a, &b) in d[i * r..(i + 1) * r].iter_mut().zip(&g.data()[k * r..(k + 1) * r]) {
                        *a += b;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g, S> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(&idx)
    }
}

/// Concatenates along the leading axis.
pub fn concat_rows<'g, S: Scalar>(parts: &[Var<'g, S>]) -> Var<'g, S> {
    let graph = parts[0].graph;
    let values: Vec<Arc<Tensor<S>>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<S>> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::stack_rows(&refs).expect("concat_rows");
    let bounds: Vec<(usize, Vec<usize>)> = values.iter().map(|v| (v.numel(), v.shape().to_vec())).collect();
    graph.record(
        out,
        parts,
        Box::new(move |g, needs| {
            let mut off = 0;
            bounds
                .iter()
                .zip(needs)
                .map(|((n, shape), &need)| {
                    let slice = &g.data()[off..off + n];
                    off += n;
                    need.then(|| Tensor::from_vec(shape, slice.to_vec()).unwrap())
                })
                .collect()
        }),
    )
}

/// Concatenates along axis 1. Every part must agree on axis 0 and on all
/// axes after 1: feature vectors `(N, d_i)` or feature maps `(N, C_i, H, W)`.
pub fn concat_features<'g, S: Scalar>(parts: &[Var<'g, S>]) -> Var<'g, S> {
    let graph = parts[0].graph;
    let values: Vec<Arc<Tensor<S>>> = parts.iter().map(|p| p.value()).collect();
    let n = values[0].rows();
    let inner: usize = values[0].shape()[2..].iter().product();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
    for v in &values {
        assert_eq!(v.rows(), n, "concat_features: batch mismatch");
        assert_eq!(&v.shape()[2..], &values[0].shape()[2..], "concat_features: trailing mismatch");
    }
    let total: usize = widths.iter().sum();
    let mut shape = values[0].shape().to_vec();
    shape[1] = total;
    let mut data = Vec::with_capacity(n * total * inner);
    for b in 0..n {
        for (v, &w) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[b * w * inner..(b + 1) * w * inner]);
        }
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    graph.record(
        Tensor::from_vec(&shape, data).unwrap(),
        parts,
        Box::new(move |g, needs| {
            let mut outs: Vec<Vec<S>> = widths.iter().map(|&w| Vec::with_capacity(n * w * inner)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..n {
                for (k, &w) in widths.iter().enumerate() {
                    outs[k].extend_from_slice(&gd[off..off + w * inner]);
                    off += w * inner;
                }
            }
            outs.into_iter()
                .zip(&shapes)
                .zip(needs)
                .map(|((d, s), &need)| need.then(|| Tensor::from_vec(s, d).unwrap()))
                .collect()
        }),
    )
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
