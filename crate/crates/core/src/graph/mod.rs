//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value and
//! a closure computing the parent gradients. [`Graph::backward`] walks the tape
//! once in reverse. Nodes that cannot reach a trainable leaf carry no closure.

pub mod kernels;
pub mod params;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{Array2, ArrayD, Axis, Ix4, IxDyn, Slice, Zip};
use rand::Rng;

use crate::Real;
use kernels::{sum_to_shape, ConvGeom};
pub use params::{Param, ParamId, ParamStore};

pub type Tensor<T> = ArrayD<T>;

/// Inputs available to a backward closure.
pub struct BackCtx<'a, T> {
    nodes: &'a [Node<T>],
    parents: &'a [usize],
    pub out: &'a ArrayD<T>,
    pub grad: &'a ArrayD<T>,
}

impl<'a, T> BackCtx<'a, T> {
    pub fn input(&self, i: usize) -> &'a ArrayD<T> {
        &self.nodes[self.parents[i]].value
    }

    pub fn needs(&self, i: usize) -> bool {
        self.nodes[self.parents[i]].requires_grad
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<ArrayD<T>>>>;

pub struct Node<T> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), bound: RefCell::new(HashMap::new()), track_params: true }
    }

    /// A tape that never records gradients; used for evaluation.
    pub fn inference() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: ArrayD<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, leaf_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node { value, parents, backward, requires_grad });
        nodes.len() - 1
    }

    fn op<F>(&self, value: ArrayD<T>, parents: Vec<usize>, back: F) -> Var<'_, T>
    where
        F: Fn(&BackCtx<'_, T>) -> Vec<Option<ArrayD<T>>> + 'static,
    {
        let id = self.push_node(value, parents, Some(Box::new(back)), false);
        Var { graph: self, id }
    }

    /// Constant input (no gradient).
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        let id = self.push_node(value, Vec::new(), None, false);
        Var { graph: self, id }
    }

    /// Leaf whose gradient is recorded.
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        let id = self.push_node(value, Vec::new(), None, true);
        Var { graph: self, id }
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Bind a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let p = store.get(id);
        let grad = self.track_params && p.trainable;
        let node = self.push_node(p.value.clone(), Vec::new(), None, grad);
        self.bound.borrow_mut().insert(id, node);
        Var { graph: self, id: node }
    }

    /// Custom differentiable op with a caller-supplied backward rule.
    pub fn custom<F>(&self, inputs: &[Var<'_, T>], value: ArrayD<T>, back: F) -> Var<'_, T>
    where
        F: Fn(&BackCtx<'_, T>) -> Vec<Option<ArrayD<T>>> + 'static,
    {
        self.op(value, inputs.iter().map(|v| v.id).collect(), back)
    }

    pub fn concat(&self, vars: &[Var<'_, T>], axis: usize) -> Var<'_, T> {
        assert!(!vars.is_empty(), "concat of nothing");
        let (value, sizes) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = vars.iter().map(|v| nodes[v.id].value.view()).collect();
            let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
            (ndarray::concatenate(Axis(axis), &views).expect("concat shapes"), sizes)
        };
        self.op(value, vars.iter().map(|v| v.id).collect(), move |ctx| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = ctx.grad.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
                    start += len;
                    Some(part)
                })
                .collect()
        })
    }

    pub fn stack(&self, vars: &[Var<'_, T>], axis: usize) -> Var<'_, T> {
        let expanded: Vec<_> = vars.iter().map(|v| v.unsqueeze(axis)).collect();
        self.concat(&expanded, axis)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::from_elem(nodes[loss.id].value.raw_dim(), T::one()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackCtx { nodes: &nodes, parents: &node.parents, out: &node.value, grad: &g };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match grads[p].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p] = Some(pg),
                }
            }
        }
        Gradients { grads, bound: self.bound.borrow().clone() }
    }
}

/// Result of [`Graph::backward`]: gradients of leaves and bound parameters.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    bound: HashMap<ParamId, usize>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.bound.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// One gradient per stored parameter; zeros where no gradient flowed.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<ArrayD<T>> {
        store
            .iter()
            .map(|(id, p)| match self.param(id) {
                Some(g) if p.trainable => g.clone(),
                _ => ArrayD::zeros(p.value.raw_dim()),
            })
            .collect()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<'g, T: Real> std::fmt::Debug for Var<'g, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn map_grad<T: Real>(x: &ArrayD<T>, g: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    let mut out = g.clone();
    Zip::from(&mut out).and(x).for_each(|o, &xv| *o = f(xv, *o));
    out
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, ArrayD<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar");
        *v.iter().next().unwrap()
    }

    fn unary<F>(&self, value: ArrayD<T>, back: F) -> Var<'g, T>
    where
        F: Fn(&BackCtx<'_, T>) -> ArrayD<T> + 'static,
    {
        self.graph.op(value, vec![self.id], move |ctx| vec![Some(back(ctx))])
    }

    pub fn add(&self, other: Var<'g, T>) -> Var<'g, T> {
        let value = &*self.value() + &*other.value();
        self.graph.op(value, vec![self.id, other.id], |ctx| {
            vec![
                ctx.needs(0).then(|| sum_to_shape(ctx.grad.clone(), ctx.input(0).shape())),
                ctx.needs(1).then(|| sum_to_shape(ctx.grad.clone(), ctx.input(1).shape())),
            ]
        })
    }

    pub fn sub(&self, other: Var<'g, T>) -> Var<'g, T> {
        let value = &*self.value() - &*other.value();
        self.graph.op(value, vec![self.id, other.id], |ctx| {
            vec![
                ctx.needs(0).then(|| sum_to_shape(ctx.grad.clone(), ctx.input(0).shape())),
                ctx.needs(1).then(|| sum_to_shape(ctx.grad.mapv(|v| -v), ctx.input(1).shape())),
            ]
        })
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: Var<'g, T>) -> Var<'g, T> {
        let value = &*self.value() * &*other.value();
        self.graph.op(value, vec![self.id, other.id], |ctx| {
            let (a, b) = (ctx.input(0), ctx.input(1));
            vec![
                ctx.needs(0).then(|| sum_to_shape(ctx.grad * b, a.shape())),
                ctx.needs(1).then(|| sum_to_shape(ctx.grad * a, b.shape())),
            ]
        })
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        let value = self.value().mapv(|v| v * s);
        self.unary(value, move |ctx| ctx.grad.mapv(|g| g * s))
    }

    pub fn add_scalar(&self, s: T) -> Var<'g, T> {
        let value = self.value().mapv(|v| v + s);
        self.unary(value, |ctx| ctx.grad.clone())
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn relu(&self) -> Var<'g, T> {
        let value = self.value().mapv(|v| v.max(T::zero()));
        self.unary(value, |ctx| map_grad(ctx.input(0), ctx.grad, |x, g| if x > T::zero() { g } else { T::zero() }))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'g, T> {
        let value = self.value().mapv(|v| if v > T::zero() { v } else { v * slope });
        self.unary(value, move |ctx| map_grad(ctx.input(0), ctx.grad, |x, g| if x > T::zero() { g } else { g * slope }))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let value = self.value().mapv(crate::scalar::sigmoid);
        self.unary(value, |ctx| map_grad(ctx.out, ctx.grad, |y, g| g * y * (T::one() - y)))
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let value = self.value().mapv(|v| v.tanh());
        self.unary(value, |ctx| map_grad(ctx.out, ctx.grad, |y, g| g * (T::one() - y * y)))
    }

    pub fn exp(&self) -> Var<'g, T> {
        let value = self.value().mapv(|v| v.exp());
        self.unary(value, |ctx| ctx.grad * ctx.out)
    }

    pub fn square(&self) -> Var<'g, T> {
        let value = self.value().mapv(|v| v * v);
        self.unary(value, |ctx| map_grad(ctx.input(0), ctx.grad, |x, g| g * (x + x)))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.unary(value, |ctx| {
            let g = *ctx.grad.iter().next().unwrap();
            ArrayD::from_elem(ctx.input(0).raw_dim(), g)
        })
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<'g, T> {
        let mut value = self.value().sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        self.unary(value, move |ctx| {
            let g = if keepdim { ctx.grad.clone() } else { ctx.grad.clone().insert_axis(Axis(axis)) };
            g.broadcast(ctx.input(0).raw_dim()).unwrap().to_owned()
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, T> {
        let value = self.value().to_shape(IxDyn(shape)).expect("reshape size").into_owned();
        self.unary(value, |ctx| ctx.grad.to_shape(ctx.input(0).raw_dim()).unwrap().into_owned())
    }

    pub fn unsqueeze(&self, axis: usize) -> Var<'g, T> {
        let mut shape = self.shape();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g, T> {
        let value = self.value().clone().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.unary(value, move |ctx| ctx.grad.clone().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Var<'g, T> {
        let value = self.value().slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        self.unary(value, move |ctx| {
            let mut g = ArrayD::zeros(ctx.input(0).raw_dim());
            g.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(ctx.grad);
            g
        })
    }

    /// `[.., k] × [k, n]` against a 2-D right operand.
    pub fn matmul(&self, w: Var<'g, T>) -> Var<'g, T> {
        let (value, lead) = {
            let x = self.value();
            let wv = w.value();
            assert_eq!(wv.ndim(), 2, "matmul right operand must be 2-D");
            let k = *x.shape().last().unwrap();
            assert_eq!(k, wv.shape()[0], "matmul inner dim mismatch");
            let rows = x.len() / k.max(1);
            let x2 = x.to_shape((rows, k)).unwrap();
            let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let out = x2.dot(&w2);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = wv.shape()[1];
            (out.to_shape(IxDyn(&shape)).unwrap().into_owned(), x.shape().to_vec())
        };
        self.graph.op(value, vec![self.id, w.id], move |ctx| {
            let x = ctx.input(0);
            let wv = ctx.input(1).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let (k, n) = wv.dim();
            let rows = x.len() / k.max(1);
            let g2 = ctx.grad.to_shape((rows, n)).unwrap();
            let gx = ctx.needs(0).then(|| g2.dot(&wv.t()).to_shape(IxDyn(&lead)).unwrap().into_owned());
            let gw = ctx.needs(1).then(|| {
                let x2 = x.to_shape((rows, k)).unwrap();
                x2.t().dot(&g2).into_dyn()
            });
            vec![gx, gw]
        })
    }

    /// Batched product with optional transposes of the trailing two axes.
    pub fn bmm(&self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Var<'g, T> {
        assert!(!(trans_a && trans_b), "bmm with both operands transposed is unsupported");
        let value = kernels::bmm(&self.value(), &other.value(), trans_a, trans_b);
        self.graph.op(value, vec![self.id, other.id], move |ctx| {
            let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let (ga, gb) = match (trans_a, trans_b) {
                (false, false) => (kernels::bmm(g, b, false, true), kernels::bmm(a, g, true, false)),
                (false, true) => (kernels::bmm(g, b, false, false), kernels::bmm(g, a, true, false)),
                (true, false) => (kernels::bmm(b, g, false, true), kernels::bmm(a, g, false, false)),
                (true, true) => unreachable!(),
            };
            vec![ctx.needs(0).then_some(ga), ctx.needs(1).then_some(gb)]
        })
    }

    /// Softmax over the last axis. `mask` (1 keep / 0 drop) broadcasts to the
    /// input; dropped entries get exactly zero weight.
    pub fn softmax(&self, mask: Option<&ArrayD<T>>) -> Var<'g, T> {
        let value = {
            let x = self.value();
            let n = *x.shape().last().unwrap();
            let rows = x.len() / n.max(1);
            let keep: ArrayD<T> = match mask {
                Some(m) => m.broadcast(x.raw_dim()).expect("mask broadcast").to_owned(),
                None => ArrayD::ones(x.raw_dim()),
            };
            let xs = x.to_shape((rows, n)).unwrap();
            let ks = keep.to_shape((rows, n)).unwrap();
            let mut out = Array2::<T>::zeros((rows, n));
            for ((xr, kr), mut or) in xs.outer_iter().zip(ks.outer_iter()).zip(out.outer_iter_mut()) {
                let mut max = T::neg_infinity();
                for (&v, &k) in xr.iter().zip(kr.iter()) {
                    if k > T::zero() && v > max {
                        max = v;
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for ((o, &v), &k) in or.iter_mut().zip(xr.iter()).zip(kr.iter()) {
                    if k > T::zero() {
                        *o = (v - max).exp();
                        total += *o;
                    }
                }
                or.mapv_inplace(|o| o / total);
            }
            out.into_shape_with_order(x.raw_dim()).unwrap()
        };
        self.unary(value, |ctx| {
            let y = ctx.out;
            let gy = ctx.grad * y;
            let last = y.ndim() - 1;
            let dot = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
            &gy - &(y * &dot)
        })
    }

    /// Normalize over the last axis (no affine part).
    pub fn layer_norm(&self, eps: T) -> Var<'g, T> {
        fn stats<T: Real>(x: &ArrayD<T>, eps: T) -> (ArrayD<T>, ArrayD<T>) {
            let last = x.ndim() - 1;
            let mean = x.mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
            let centered = x - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
            let inv = var.mapv(|v| T::one() / (v + eps).sqrt());
            (centered, inv)
        }
        let value = {
            let x = self.value();
            let (centered, inv) = stats(&x, eps);
            centered * &inv
        };
        self.unary(value, move |ctx| {
            let (_, inv) = stats(ctx.input(0), eps);
            let y = ctx.out;
            let g = ctx.grad;
            let last = y.ndim() - 1;
            let mean_g = g.mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
            let mean_gy = (g * y).mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
            (g - &mean_g - &(y * &mean_gy)) * &inv
        })
    }

    /// 2-D convolution, `self: N×C×H×W`, `w: O×C×kh×kw`, `b: O`.
    pub fn conv2d(&self, w: Var<'g, T>, b: Option<Var<'g, T>>, geom: ConvGeom) -> Var<'g, T> {
        let value = {
            let x = self.value();
            let wv = w.value();
            let bv = b.map(|b| b.value());
            let x4 = x.view().into_dimensionality::<Ix4>().expect("conv2d input must be 4-D");
            let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv2d weight must be 4-D");
            let b1 = bv.as_ref().map(|b| b.view().into_dimensionality::<ndarray::Ix1>().unwrap());
            kernels::conv2d_forward(x4, w4, b1, geom).into_dyn()
        };
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            parents.push(b.id);
        }
        let has_bias = b.is_some();
        self.graph.op(value, parents, move |ctx| {
            let x4 = ctx.input(0).view().into_dimensionality::<Ix4>().unwrap();
            let w4 = ctx.input(1).view().into_dimensionality::<Ix4>().unwrap();
            let g4 = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
            let (dx, dw, db) = kernels::conv2d_backward(x4, w4, g4, geom, ctx.needs(0));
            let mut out = vec![dx.map(|d| d.into_dyn()), ctx.needs(1).then(|| dw.into_dyn())];
            if has_bias {
                out.push(ctx.needs(2).then(|| db.into_dyn()));
            }
            out
        })
    }

    /// Row lookup: `self` is a `V×D` table, `indices` any shape → `[.., D]`.
    pub fn gather_rows(&self, indices: &ndarray::ArrayD<usize>) -> Var<'g, T> {
        let value = {
            let table = self.value();
            let d = table.shape()[1];
            let mut shape = indices.shape().to_vec();
            shape.push(d);
            let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
            {
                let mut rows = out.to_shape((indices.len(), d)).unwrap();
                for (mut row, &ix) in rows.outer_iter_mut().zip(indices.iter()) {
                    row.assign(&table.index_axis(Axis(0), ix));
                }
                let flat = rows.into_owned();
                out = flat.into_shape_with_order(IxDyn(&shape)).unwrap();
            }
            out
        };
        let indices = indices.clone();
        self.unary(value, move |ctx| {
            let table = ctx.input(0);
            let d = table.shape()[1];
            let mut g = ArrayD::<T>::zeros(table.raw_dim());
            let rows = ctx.grad.to_shape((indices.len(), d)).unwrap();
            for (row, &ix) in rows.outer_iter().zip(indices.iter()) {
                let mut dst = g.index_axis_mut(Axis(0), ix);
                dst += &row;
            }
            g
        })
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Var<'g, T> {
        if p <= 0.0 {
            return *self;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = ArrayD::from_shape_simple_fn(self.value().raw_dim(), || {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.graph.constant(mask);
        self.mul(m)
    }
}

impl<'g, T: Real> std::ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(&self, rhs)
    }
}

impl<'g, T: Real> std::ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(&self, rhs)
    }
}

impl<'g, T: Real> std::ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(&self, rhs)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &ArrayD<f64>, h: f64, mut f: impl FnMut(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max elementwise relative error, `|a-b| / max(|a|+|b|, floor)`.
pub fn relative_error(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(floor))
        .fold(0.0, f64::max)
}
