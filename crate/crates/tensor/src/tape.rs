use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use crate::array::{broadcast_shape, broadcast_to, broadcast_zip, sum_to_shape};
use crate::kernels::{self, ConvGeometry};
use crate::params::ParamStore;
use crate::{Array, Element};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary<T> {
    Neg,
    Sqr,
    Sqrt,
    Rsqrt,
    Abs,
    Exp,
    Ln,
    Sigmoid,
    Softplus,
    LeakyRelu { slope: T, gain: T },
    Clamp { lo: T, hi: T },
}

impl<T: Element> Unary<T> {
    fn apply(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Sqr => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Rsqrt => x.sqrt().recip(),
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::LeakyRelu { slope, gain } => gain * if x > T::zero() { x } else { slope * x },
            Unary::Clamp { lo, hi } => x.max(lo).min(hi),
        }
    }

    /// d(output)/d(input) from the input `x` and output `y`.
    fn derivative(self, x: T, y: T) -> T {
        let one = T::one();
        let half = T::from_f64_lossy(0.5);
        match self {
            Unary::Neg => -one,
            Unary::Sqr => (one + one) * x,
            Unary::Sqrt => half / y,
            Unary::Rsqrt => -half * y * y * y,
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::Exp => y,
            Unary::Ln => x.recip(),
            Unary::Sigmoid => y * (one - y),
            Unary::Softplus => sigmoid(x),
            Unary::LeakyRelu { slope, gain } => gain * if x > T::zero() { one } else { slope },
            Unary::Clamp { lo, hi } => {
                if x >= lo && x <= hi {
                    one
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Element>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Unary(usize, Unary<T>),
    SumAll(usize),
    SumAxes(usize),
    Reshape(usize),
    Transpose2(usize),
    MatMul { a: usize, b: usize, b_transposed: bool },
    Conv2d { x: usize, w: usize, geo: ConvGeometry },
    Upsample2x(usize),
    AvgPool2x(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Every forward op appends a node; [`Tape::backward`] walks them in reverse.
/// A tape is meant to live for one forward/backward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<(u64, String), usize>>,
    trainable: RefCell<HashSet<u64>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            trainable: RefCell::new(HashSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push_shared(&self, value: Arc<Array<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> Arc<Array<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Array<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Marks parameters of `store` as differentiable on this tape. Must be
    /// called before the first [`Tape::param`] lookup into that store.
    pub fn train(&self, store: &ParamStore<T>) {
        self.trainable.borrow_mut().insert(store.id());
    }

    /// Leaf node for a named parameter, shared across repeated lookups.
    ///
    /// Panics if the store has no such tensor; model code validates its
    /// parameter set at load time.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Var<'_, T> {
        let key = (store.id(), name.to_string());
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let value = store
            .get_shared(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        let trainable = self.trainable.borrow().contains(&store.id());
        let var = self.push_shared(value, trainable);
        self.params.borrow_mut().insert(key, var.id);
        var
    }

    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Var<'_, T> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Array<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Array::concat(&refs, axis);
        let rg = parts.iter().any(|p| self.requires_grad(p.id));
        self.push(out, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg)
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let shape = root.shape();
        assert_eq!(shape.iter().product::<usize>(), 1, "backward root must be scalar, got {shape:?}");
        self.backward_with(root, Array::ones(&shape))
    }

    /// Back-propagates an explicit output cotangent `seed`.
    pub fn backward_with(&self, root: Var<'_, T>, seed: Array<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |target: usize, grad: Array<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            };
            let val = |i: usize| nodes[i].value.as_ref();
            let rg = |i: usize| nodes[i].requires_grad;
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rg(a) {
                        send(a, sum_to_shape(&g, val(a).shape()));
                    }
                    if rg(b) {
                        send(b, sum_to_shape(&g, val(b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(a) {
                        send(a, sum_to_shape(&g, val(a).shape()));
                    }
                    if rg(b) {
                        send(b, sum_to_shape(&g, val(b).shape()).map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let prod = broadcast_zip(&g, val(b), |x, y| x * y);
                        send(a, sum_to_shape(&prod, val(a).shape()));
                    }
                    if rg(b) {
                        let prod = broadcast_zip(&g, val(a), |x, y| x * y);
                        send(b, sum_to_shape(&prod, val(b).shape()));
                    }
                }
                Op::AddScalar(a) => send(a, g),
                Op::MulScalar(a, s) => send(a, g.map(|x| x * s)),
                Op::Unary(a, u) => {
                    let x = val(a);
                    let y = node.value.as_ref();
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gi, (&xi, &yi))| gi * u.derivative(xi, yi))
                        .collect();
                    send(a, Array::from_vec(x.shape(), data));
                }
                Op::SumAll(a) => send(a, Array::full(val(a).shape(), g.data()[0])),
                Op::SumAxes(a) => send(a, broadcast_to(&g, val(a).shape())),
                Op::Reshape(a) => send(a, g.reshape(val(a).shape())),
                Op::Transpose2(a) => send(a, g.transpose2()),
                Op::MatMul { a, b, b_transposed } => {
                    if rg(a) {
                        send(a, kernels::matmul(&g, val(b), !b_transposed));
                    }
                    if rg(b) {
                        let gb = if b_transposed {
                            kernels::matmul_at_b(&g, val(a))
                        } else {
                            kernels::matmul_at_b(val(a), &g)
                        };
                        send(b, gb);
                    }
                }
                Op::Conv2d { x, w, geo } => {
                    if rg(x) {
                        send(x, kernels::conv2d_backward_input(&g, val(x).shape(), val(w), geo));
                    }
                    if rg(w) {
                        send(w, kernels::conv2d_backward_weight(&g, val(x), val(w).shape(), geo));
                    }
                }
                Op::Upsample2x(a) => send(a, kernels::sum_pool2x(&g)),
                Op::AvgPool2x(a) => {
                    let quarter = T::from_f64_lossy(0.25);
                    send(a, kernels::upsample_nearest2x(&g).map(|x| x * quarter));
                }
                Op::Concat { ref parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[axis];
                        if rg(p) {
                            send(p, g.narrow(axis, start, len));
                        }
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let full = val(x).shape();
                    let len = g.shape()[axis];
                    let mut pieces = Vec::new();
                    let mut before = full.to_vec();
                    before[axis] = start;
                    let mut after = full.to_vec();
                    after[axis] = full[axis] - start - len;
                    let zb = Array::zeros(&before);
                    let za = Array::zeros(&after);
                    if start > 0 {
                        pieces.push(&zb);
                    }
                    pieces.push(&g);
                    if after[axis] > 0 {
                        pieces.push(&za);
                    }
                    send(x, Array::concat(&pieces, axis));
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Array<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when it did not influence the root.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Array<T> {
        self.get(var).cloned().unwrap_or_else(|| Array::zeros(&var.shape()))
    }

    /// Gradients of every parameter of `store` that was used on `tape`.
    /// Parameters that were looked up but received no gradient map to zeros.
    pub fn for_store(&self, tape: &Tape<T>, store: &ParamStore<T>) -> HashMap<String, Array<T>> {
        let params = tape.params.borrow();
        params
            .iter()
            .filter(|((sid, _), _)| *sid == store.id())
            .map(|((_, name), &id)| {
                let g = self.grads[id]
                    .clone()
                    .unwrap_or_else(|| Array::zeros(tape.nodes.borrow()[id].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Array<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.push_shared(self.value(), false)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on shape {:?}", v.shape());
        v.data()[0]
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, f);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(out, op, rg)
    }

    fn unary(self, u: Unary<T>) -> Var<'t, T> {
        let out = self.value().map(|x| u.apply(x));
        self.tape.push(out, Op::Unary(self.id, u), self.requires_grad())
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::from_f64_lossy(s);
        let out = self.value().map(|x| x + s);
        self.tape.push(out, Op::AddScalar(self.id), self.requires_grad())
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::from_f64_lossy(s);
        let out = self.value().map(|x| x * s);
        self.tape.push(out, Op::MulScalar(self.id, s), self.requires_grad())
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t, T> {
        self.neg().add_scalar(1.0)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(Unary::Neg)
    }

    pub fn sqr(self) -> Var<'t, T> {
        self.unary(Unary::Sqr)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Unary::Sqrt)
    }

    pub fn rsqrt(self) -> Var<'t, T> {
        self.unary(Unary::Rsqrt)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(Unary::Abs)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(Unary::Ln)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(Unary::Softplus)
    }

    /// `gain * (x > 0 ? x : slope * x)`.
    pub fn leaky_relu(self, slope: f64, gain: f64) -> Var<'t, T> {
        self.unary(Unary::LeakyRelu { slope: T::from_f64_lossy(slope), gain: T::from_f64_lossy(gain) })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        self.unary(Unary::Clamp { lo: T::from_f64_lossy(lo), hi: T::from_f64_lossy(hi) })
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let out = Array::scalar(self.value().sum());
        self.tape.push(out, Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t, T> {
        let out = crate::array::sum_axes_keepdim(&self.value(), axes);
        self.tape.push(out, Op::SumAxes(self.id), self.requires_grad())
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t, T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / count as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let out = self.value().as_ref().clone().reshape(shape);
        self.tape.push(out, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn transpose2(self) -> Var<'t, T> {
        let out = self.value().transpose2();
        self.tape.push(out, Op::Transpose2(self.id), self.requires_grad())
    }

    /// Matrix product `self (m x k) * other (k x n)`.
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, false)
    }

    /// Matrix product `self (m x k) * otherᵀ` for `other (n x k)`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, T>, b_transposed: bool) -> Var<'t, T> {
        let out = kernels::matmul(&self.value(), &other.value(), b_transposed);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(out, Op::MatMul { a: self.id, b: other.id, b_transposed }, rg)
    }

    /// 2-D cross-correlation of an NCHW input with an OIHW weight.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, padding: usize) -> Var<'t, T> {
        let geo = ConvGeometry { stride, padding };
        let out = kernels::conv2d(&self.value(), &weight.value(), geo);
        let rg = self.requires_grad() || weight.requires_grad();
        self.tape.push(out, Op::Conv2d { x: self.id, w: weight.id, geo }, rg)
    }

    pub fn upsample2x(self) -> Var<'t, T> {
        let out = kernels::upsample_nearest2x(&self.value());
        self.tape.push(out, Op::Upsample2x(self.id), self.requires_grad())
    }

    pub fn avg_pool2x(self) -> Var<'t, T> {
        let out = kernels::avg_pool2x(&self.value());
        self.tape.push(out, Op::AvgPool2x(self.id), self.requires_grad())
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let out = self.value().narrow(axis, start, len);
        self.tape.push(out, Op::Narrow { x: self.id, axis, start }, self.requires_grad())
    }

    /// Whether `self` and `other` broadcast together.
    pub fn broadcasts_with(&self, other: &Var<'t, T>) -> bool {
        broadcast_shape(&self.shape(), &other.shape()).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_scalar_functions() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-800.0f64), 0.0);
        assert_eq!(softplus(800.0f64), 800.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.3f64) + sigmoid(-0.3) - 1.0).abs() < 1e-16);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::from_f64_slice(&[2], &[3.0, -2.0]));
        let y = x.mul(x).add(x).sum_all();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Array::ones(&[3]));
        let c = tape.constant(Array::full(&[3], 2.0));
        let g = tape.backward(x.mul(c).sum_all());
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_flow() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::scalar(2.0));
        let y = x.mul(x.detach()).sum_all();
        assert_eq!(tape.backward(y).get(x).unwrap().data(), &[2.0]);
    }
}
