//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A `Tape` owns an append-only arena of nodes. Each node stores the
//! operation that produced it, the ids of its inputs, and the forward
//! value. `backward` walks the arena once in reverse and accumulates
//! adjoints with `+=`, so a node feeding several consumers receives the
//! sum of their contributions. Re-running the same builder calls on a
//! fresh tape reproduces identical values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::{fmt_shape, numel_of, Tensor};

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `b`'s shape is a trailing suffix of `a`'s; `b` is broadcast over the
    /// leading axes (bias adds, position tables).
    AddSuffix { a: usize, b: usize },
    /// Multiplies by a vector laid along one axis of `a`.
    MulAxisVec { a: usize, v: usize, axis: usize },
    Scale { a: usize, factor: T },
    AddScalar { a: usize },
    /// Matrix product over the last two axes; leading axes broadcast when
    /// one operand's batch shape is a suffix of the other's.
    MatMul { a: usize, b: usize },
    TransposeLast2 { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Reshape { a: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    SoftmaxLast { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: T },
    MeanAxis { a: usize, axis: usize },
    SumAll { a: usize },
    ConcatLast { a: usize, b: usize },
    SliceLastPrefix { a: usize },
    /// Piecewise-linear resampling of the second-to-last (token) axis.
    Interp {
        a: usize,
        lengths: Option<Vec<usize>>,
    },
    ExpandLeading { a: usize },
    Embedding { table: usize, ids: Vec<u32> },
    CrossEntropy {
        logits: usize,
        labels: Vec<i64>,
        counted: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<bool>,
        keep_scale: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    check_finite: bool,
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numerically stable logistic, clamped to the widest open interval inside
/// (0, 1) so gate outputs never reach the endpoints exactly.
fn sigmoid_stable<T: Real>(x: T) -> T {
    let raw = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    raw.max(T::min_positive_value()).min(hi)
}

const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_value<T: Real>(x: T) -> T {
    let k = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let k = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * c * x * x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            // Forward outputs are scanned for NaN/Inf in debug builds; the
            // scan costs a full pass per node, so release builds rely on
            // the trainer's loss check instead.
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn backward_done(&self) -> bool {
        self.backward_done
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Result<NodeId> {
        debug_assert_eq!(numel_of(&shape), value.len());
        if self.check_finite && !matches!(op, Op::Leaf) {
            if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite value {bad} in node {} of shape {}",
                    self.nodes.len(),
                    fmt_shape(&shape)
                )));
            }
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.node(id).value
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        let n = self.node(id);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape/value always consistent")
    }

    /// Adjoint of a node after `backward`. `None` when backward has not run
    /// or no gradient reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Enters a tensor as a differentiable input if it has `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
            .expect("leaf never fails the finite check")
    }

    /// Enters a tensor with gradient tracking off regardless of its flag.
    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
            .expect("leaf never fails the finite check")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y)
    }

    fn binary_same_shape(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::dim(format!(
                "{name}: shapes {} and {} differ",
                fmt_shape(&na.shape),
                fmt_shape(&nb.shape)
            )));
        }
        let value: Vec<T> = na
            .value
            .iter()
            .zip(nb.value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad || nb.needs_grad;
        let op = match name {
            "add" => Op::Add { a: a.0, b: b.0 },
            "sub" => Op::Sub { a: a.0, b: b.0 },
            _ => Op::Mul { a: a.0, b: b.0 },
        };
        self.push(op, shape, value, needs)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (self.node(a), self.node(b));
        if !na.shape.ends_with(&nb.shape) {
            return Err(Error::dim(format!(
                "add_suffix: {} is not a trailing suffix of {}",
                fmt_shape(&nb.shape),
                fmt_shape(&na.shape)
            )));
        }
        let block = nb.value.len().max(1);
        let value: Vec<T> = na
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + nb.value[i % block])
            .collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad || nb.needs_grad;
        self.push(Op::AddSuffix { a: a.0, b: b.0 }, shape, value, needs)
    }

    /// Multiplies `a` elementwise by a vector `v` laid along `axis`.
    pub fn mul_axis_vec(&mut self, a: NodeId, v: NodeId, axis: usize) -> Result<NodeId> {
        let (na, nv) = (self.node(a), self.node(v));
        if axis >= na.shape.len() {
            return Err(Error::dim(format!(
                "mul_axis_vec: axis {axis} out of range for {}",
                fmt_shape(&na.shape)
            )));
        }
        if nv.shape.len() != 1 || nv.shape[0] != na.shape[axis] {
            return Err(Error::dim(format!(
                "mul_axis_vec: vector {} does not match axis {axis} of {}",
                fmt_shape(&nv.shape),
                fmt_shape(&na.shape)
            )));
        }
        let inner: usize = na.shape[axis + 1..].iter().product();
        let len = na.shape[axis];
        let value: Vec<T> = na
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x * nv.value[(i / inner) % len])
            .collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad || nv.needs_grad;
        self.push(Op::MulAxisVec { a: a.0, v: v.0, axis }, shape, value, needs)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let na = self.node(a);
        let value: Vec<T> = na.value.iter().map(|&x| x * factor).collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad;
        self.push(Op::Scale { a: a.0, factor }, shape, value, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: T) -> Result<NodeId> {
        let na = self.node(a);
        let value: Vec<T> = na.value.iter().map(|&x| x + offset).collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad;
        self.push(Op::AddScalar { a: a.0 }, shape, value, needs)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, T::one())
    }

    /// Batched matrix product over the last two axes. When the operands'
    /// leading (batch) shapes differ, the shorter one must be a trailing
    /// suffix of the longer and is broadcast over the extra axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() < 2 || nb.shape.len() < 2 {
            return Err(Error::dim(format!(
                "matmul: operands must have at least 2 axes, got {} and {}",
                fmt_shape(&na.shape),
                fmt_shape(&nb.shape)
            )));
        }
        let (m, ka) = (na.shape[na.shape.len() - 2], na.shape[na.shape.len() - 1]);
        let (kb, n) = (nb.shape[nb.shape.len() - 2], nb.shape[nb.shape.len() - 1]);
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree, {} vs {}",
                fmt_shape(&na.shape),
                fmt_shape(&nb.shape)
            )));
        }
        let abat = &na.shape[..na.shape.len() - 2];
        let bbat = &nb.shape[..nb.shape.len() - 2];
        let out_bat: Vec<usize> = if abat.len() >= bbat.len() {
            if !abat.ends_with(bbat) {
                return Err(Error::dim(format!(
                    "matmul: batch shape of {} is not broadcastable against {}",
                    fmt_shape(&nb.shape),
                    fmt_shape(&na.shape)
                )));
            }
            abat.to_vec()
        } else {
            if !bbat.ends_with(abat) {
                return Err(Error::dim(format!(
                    "matmul: batch shape of {} is not broadcastable against {}",
                    fmt_shape(&na.shape),
                    fmt_shape(&nb.shape)
                )));
            }
            bbat.to_vec()
        };
        let pa: usize = abat.iter().product();
        let pb: usize = bbat.iter().product();
        let po: usize = out_bat.iter().product();

        let mut value = vec![T::zero(); po * m * n];
        for ob in 0..po {
            let ia = if pa == po { ob } else { ob % pa };
            let ib = if pb == po { ob } else { ob % pb };
            let av = &na.value[ia * m * ka..(ia + 1) * m * ka];
            let bv = &nb.value[ib * ka * n..(ib + 1) * ka * n];
            let ov = &mut value[ob * m * n..(ob + 1) * m * n];
            for i in 0..m {
                for k in 0..ka {
                    let x = av[i * ka + k];
                    if x == T::zero() {
                        continue;
                    }
                    let brow = &bv[k * n..(k + 1) * n];
                    let orow = &mut ov[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let mut shape = out_bat;
        shape.push(m);
        shape.push(n);
        let needs = na.needs_grad || nb.needs_grad;
        self.push(Op::MatMul { a: a.0, b: b.0 }, shape, value, needs)
    }

    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.node(a);
        let nd = na.shape.len();
        if nd < 2 {
            return Err(Error::dim(format!(
                "transpose_last2: need at least 2 axes, got {}",
                fmt_shape(&na.shape)
            )));
        }
        let (r, c) = (na.shape[nd - 2], na.shape[nd - 1]);
        let batch: usize = na.shape[..nd - 2].iter().product();
        let mut value = vec![T::zero(); na.value.len()];
        for bi in 0..batch {
            let src = &na.value[bi * r * c..(bi + 1) * r * c];
            let dst = &mut value[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = na.shape.clone();
        shape.swap(nd - 2, nd - 1);
        let needs = na.needs_grad;
        self.push(Op::TransposeLast2 { a: a.0 }, shape, value, needs)
    }

    /// Reorders axes: output axis `i` takes input axis `axes[i]`.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let na = self.node(a);
        let nd = na.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || core::mem::replace(&mut seen[ax], true)) {
            return Err(Error::dim(format!(
                "permute: {axes:?} is not a permutation of the {nd} axes of {}",
                fmt_shape(&na.shape)
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| na.shape[ax]).collect();
        let value = permute_data(&na.value, &na.shape, axes, &out_shape);
        let needs = na.needs_grad;
        self.push(
            Op::Permute { a: a.0, axes: axes.to_vec() },
            out_shape,
            value,
            needs,
        )
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let na = self.node(a);
        if numel_of(new_shape) != na.value.len() {
            return Err(Error::dim(format!(
                "reshape: {} to {} changes the element count",
                fmt_shape(&na.shape),
                fmt_shape(new_shape)
            )));
        }
        let value = na.value.clone();
        let needs = na.needs_grad;
        self.push(Op::Reshape { a: a.0 }, new_shape.to_vec(), value, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.node(a);
        let value: Vec<T> = na.value.iter().map(|&x| sigmoid_stable(x)).collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad;
        self.push(Op::Sigmoid { a: a.0 }, shape, value, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.node(a);
        let value: Vec<T> = na.value.iter().map(|&x| gelu_value(x)).collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad;
        self.push(Op::Gelu { a: a.0 }, shape, value, needs)
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.node(a);
        if na.shape.is_empty() {
            return Err(Error::dim("softmax_last: rank-0 input"));
        }
        let c = na.shape[na.shape.len() - 1];
        let rows = na.value.len() / c.max(1);
        let mut value = vec![T::zero(); na.value.len()];
        for r in 0..rows {
            let src = &na.value[r * c..(r + 1) * c];
            let dst = &mut value[r * c..(r + 1) * c];
            let m = src.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut sum = T::zero();
            for j in 0..c {
                let e = (src[j] - m).exp();
                dst[j] = e;
                sum += e;
            }
            for j in 0..c {
                dst[j] = dst[j] / sum;
            }
        }
        let shape = na.shape.clone();
        let needs = na.needs_grad;
        self.push(Op::SoftmaxLast { a: a.0 }, shape, value, needs)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the learned elementwise affine (`gamma`, `beta`).
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (na, ng, nb) = (self.node(a), self.node(gamma), self.node(beta));
        if na.shape.is_empty() {
            return Err(Error::dim("layer_norm: rank-0 input"));
        }
        let c = na.shape[na.shape.len() - 1];
        if ng.shape != [c] || nb.shape != [c] {
            return Err(Error::dim(format!(
                "layer_norm: gamma {} and beta {} must both be [{c}]",
                fmt_shape(&ng.shape),
                fmt_shape(&nb.shape)
            )));
        }
        let rows = na.value.len() / c;
        let mut value = vec![T::zero(); na.value.len()];
        let inv_c = T::one() / T::from_f64(c as f64);
        for r in 0..rows {
            let src = &na.value[r * c..(r + 1) * c];
            let dst = &mut value[r * c..(r + 1) * c];
            let mut mean = T::zero();
            for &x in src {
                mean += x;
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for &x in src {
                let d = x - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                dst[j] = ng.value[j] * (src[j] - mean) * rstd + nb.value[j];
            }
        }
        let shape = na.shape.clone();
        let needs = na.needs_grad || ng.needs_grad || nb.needs_grad;
        self.push(
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, eps },
            shape,
            value,
            needs,
        )
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let na = self.node(a);
        if axis >= na.shape.len() {
            return Err(Error::dim(format!(
                "mean_axis: axis {axis} out of range for {}",
                fmt_shape(&na.shape)
            )));
        }
        let outer: usize = na.shape[..axis].iter().product();
        let len = na.shape[axis];
        let inner: usize = na.shape[axis + 1..].iter().product();
        let inv = T::one() / T::from_f64(len as f64);
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &na.value[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut value[o * inner..(o + 1) * inner];
                for j in 0..inner {
                    dst[j] += src[j];
                }
            }
        }
        for v in value.iter_mut() {
            *v = *v * inv;
        }
        let mut shape = na.shape.clone();
        shape.remove(axis);
        let needs = na.needs_grad;
        self.push(Op::MeanAxis { a: a.0, axis }, shape, value, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.node(a);
        let mut sum = T::zero();
        for &x in &na.value {
            sum += x;
        }
        let needs = na.needs_grad;
        self.push(Op::SumAll { a: a.0 }, Vec::new(), vec![sum], needs)
    }

    /// Concatenates along the last axis; all leading axes must match.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != nb.shape.len() || na.shape.is_empty() {
            return Err(Error::dim(format!(
                "concat_last: ranks differ or rank-0, {} vs {}",
                fmt_shape(&na.shape),
                fmt_shape(&nb.shape)
            )));
        }
        let nd = na.shape.len();
        if na.shape[..nd - 1] != nb.shape[..nd - 1] {
            return Err(Error::dim(format!(
                "concat_last: leading axes differ, {} vs {}",
                fmt_shape(&na.shape),
                fmt_shape(&nb.shape)
            )));
        }
        let (ca, cb) = (na.shape[nd - 1], nb.shape[nd - 1]);
        let rows: usize = na.shape[..nd - 1].iter().product();
        let mut value = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            value.extend_from_slice(&na.value[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&nb.value[r * cb..(r + 1) * cb]);
        }
        let mut shape = na.shape.clone();
        shape[nd - 1] = ca + cb;
        let needs = na.needs_grad || nb.needs_grad;
        self.push(Op::ConcatLast { a: a.0, b: b.0 }, shape, value, needs)
    }

    /// Keeps the first `width` channels of the last axis.
    pub fn slice_last_prefix(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        let na = self.node(a);
        if na.shape.is_empty() {
            return Err(Error::dim("slice_last_prefix: rank-0 input"));
        }
        let nd = na.shape.len();
        let c = na.shape[nd - 1];
        if width > c {
            return Err(Error::dim(format!(
                "slice_last_prefix: width {width} exceeds last axis of {}",
                fmt_shape(&na.shape)
            )));
        }
        let rows: usize = na.shape[..nd - 1].iter().product();
        let mut value = Vec::with_capacity(rows * width);
        for r in 0..rows {
            value.extend_from_slice(&na.value[r * c..r * c + width]);
        }
        let mut shape = na.shape.clone();
        shape[nd - 1] = width;
        let needs = na.needs_grad;
        self.push(Op::SliceLastPrefix { a: a.0 }, shape, value, needs)
    }

    /// Linearly resamples the token axis (second-to-last) to `out_len`
    /// points. Output position `j` samples the source at fraction
    /// `j / (out_len - 1)` of the valid span; a single output point samples
    /// position 0. With `lengths`, each leading item only uses its first
    /// `lengths[i]` tokens, so padding never leaks into the result; a
    /// one-token span broadcasts that token. Resampling to the same length
    /// reproduces the input bit for bit.
    pub fn interp_tokens(
        &mut self,
        a: NodeId,
        out_len: usize,
        lengths: Option<&[usize]>,
    ) -> Result<NodeId> {
        let na = self.node(a);
        if na.shape.len() < 2 {
            return Err(Error::dim(format!(
                "interp_tokens: need at least 2 axes, got {}",
                fmt_shape(&na.shape)
            )));
        }
        if out_len == 0 {
            return Err(Error::dim("interp_tokens: zero output length"));
        }
        let nd = na.shape.len();
        let t_in = na.shape[nd - 2];
        let c = na.shape[nd - 1];
        let lead: usize = na.shape[..nd - 2].iter().product();
        if let Some(ls) = lengths {
            if ls.len() != lead {
                return Err(Error::dim(format!(
                    "interp_tokens: {} lengths for {lead} leading items",
                    ls.len()
                )));
            }
            if let Some(&bad) = ls.iter().find(|&&l| l == 0 || l > t_in) {
                return Err(Error::dim(format!(
                    "interp_tokens: length {bad} outside 1..={t_in}"
                )));
            }
        }
        if t_in == 0 {
            return Err(Error::dim("interp_tokens: empty token axis"));
        }
        let mut value = vec![T::zero(); lead * out_len * c];
        for li in 0..lead {
            let ll = lengths.map_or(t_in, |ls| ls[li]);
            let src = &na.value[li * t_in * c..(li + 1) * t_in * c];
            for j in 0..out_len {
                let p = if out_len == 1 {
                    0.0
                } else {
                    j as f64 * (ll - 1) as f64 / (out_len - 1) as f64
                };
                let i0 = p.floor() as usize;
                let w = p - i0 as f64;
                let dst = &mut value[(li * out_len + j) * c..(li * out_len + j + 1) * c];
                if w == 0.0 {
                    dst.copy_from_slice(&src[i0 * c..(i0 + 1) * c]);
                } else {
                    let i1 = (i0 + 1).min(ll - 1);
                    let wt = T::from_f64(w);
                    let wo = T::one() - wt;
                    for ch in 0..c {
                        dst[ch] = wo * src[i0 * c + ch] + wt * src[i1 * c + ch];
                    }
                }
            }
        }
        let mut shape = na.shape.clone();
        shape[nd - 2] = out_len;
        let needs = na.needs_grad;
        self.push(
            Op::Interp { a: a.0, lengths: lengths.map(|l| l.to_vec()) },
            shape,
            value,
            needs,
        )
    }

    /// Repeats the whole tensor `copies` times along a new leading axis.
    pub fn expand_leading(&mut self, a: NodeId, copies: usize) -> Result<NodeId> {
        if copies == 0 {
            return Err(Error::dim("expand_leading: zero copies"));
        }
        let na = self.node(a);
        let mut value = Vec::with_capacity(copies * na.value.len());
        for _ in 0..copies {
            value.extend_from_slice(&na.value);
        }
        let mut shape = vec![copies];
        shape.extend_from_slice(&na.shape);
        let needs = na.needs_grad;
        self.push(Op::ExpandLeading { a: a.0 }, shape, value, needs)
    }

    /// Row lookup into an embedding table of shape `[vocab, width]`. The
    /// output has shape `leading ++ [width]` with one row per id.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32], leading: &[usize]) -> Result<NodeId> {
        let nt = self.node(table);
        if nt.shape.len() != 2 {
            return Err(Error::dim(format!(
                "embedding: table must be 2-D, got {}",
                fmt_shape(&nt.shape)
            )));
        }
        let (vocab, width) = (nt.shape[0], nt.shape[1]);
        if numel_of(leading) != ids.len() {
            return Err(Error::dim(format!(
                "embedding: {} ids for leading shape {}",
                ids.len(),
                fmt_shape(leading)
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::data(format!(
                "embedding: id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut value = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let r = id as usize;
            value.extend_from_slice(&nt.value[r * width..(r + 1) * width]);
        }
        let mut shape = leading.to_vec();
        shape.push(width);
        let needs = nt.needs_grad;
        self.push(
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            shape,
            value,
            needs,
        )
    }

    /// Mean cross-entropy over rows of `logits` (`[N, classes]`). A label of
    /// -1 excludes its row from the mean; at least one row must count.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[i64]) -> Result<NodeId> {
        let nl = self.node(logits);
        if nl.shape.len() != 2 {
            return Err(Error::dim(format!(
                "cross_entropy_mean: logits must be 2-D, got {}",
                fmt_shape(&nl.shape)
            )));
        }
        let (n, c) = (nl.shape[0], nl.shape[1]);
        if labels.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy_mean: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < -1 || l >= c as i64) {
            return Err(Error::data(format!(
                "cross_entropy_mean: label {bad} outside -1..{c}"
            )));
        }
        let counted = labels.iter().filter(|&&l| l >= 0).count();
        if counted == 0 {
            return Err(Error::data(
                "cross_entropy_mean: every label is the ignore marker",
            ));
        }
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label < 0 {
                continue;
            }
            let row = &nl.value[i * c..(i + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut sum = T::zero();
            for &x in row {
                sum += (x - m).exp();
            }
            let lse = m + sum.ln();
            total += lse - row[label as usize];
        }
        let value = total / T::from_f64(counted as f64);
        let needs = nl.needs_grad;
        self.push(
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), counted },
            Vec::new(),
            vec![value],
            needs,
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// rescales by `1 / (1 - p)`. `p == 0` returns the input unchanged.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut SeededRng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout: rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let len = self.node(a).value.len();
        let mask: Vec<bool> = (0..len).map(|_| rng.uniform(0.0, 1.0) >= p).collect();
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let na = self.node(a);
        let value: Vec<T> = na
            .value
            .iter()
            .zip(mask.iter())
            .map(|(&x, &keep)| if keep { x * keep_scale } else { T::zero() })
            .collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad;
        self.push(Op::Dropout { a: a.0, mask, keep_scale }, shape, value, needs)
    }

    /// Seeds the adjoint of `loss` with 1 and accumulates gradients into
    /// every reachable node that needs them. Runs once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::state(
                "backward already ran on this tape; rebuild the graph to differentiate again",
            ));
        }
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must hold one element, got shape {}",
                fmt_shape(&ln.shape)
            )));
        }
        let loss_needs_grad = ln.needs_grad;
        self.backward_done = true;
        if !loss_needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (lo_nodes, hi_nodes) = self.nodes.split_at(i);
            let node = &hi_nodes[0];
            let (lo_grads, hi_grads) = self.grads.split_at_mut(i);
            let g = hi_grads[0].as_ref().expect("checked above");
            propagate(node, g, lo_nodes, lo_grads);
        }
        Ok(())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn permute_data<T: Real>(
    data: &[T],
    in_shape: &[usize],
    axes: &[usize],
    out_shape: &[usize],
) -> Vec<T> {
    let nd = in_shape.len();
    let in_strides = strides_of(in_shape);
    let mapped: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let mut in_flat = 0;
        for d in 0..nd {
            in_flat += idx[d] * mapped[d];
        }
        out.push(data[in_flat]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Returns a zero-initialized adjoint buffer for node `idx`.
fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], idx: usize, len: usize) -> &'g mut [T] {
    grads[idx]
        .get_or_insert_with(|| vec![T::zero(); len])
        .as_mut_slice()
}

/// Adds this node's contribution to the adjoints of its inputs. `nodes` and
/// `grads` cover only ids below the current node, which is always enough
/// because inputs precede outputs on the tape.
fn propagate<T: Real>(
    node: &Node<T>,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for &(input, _) in [(*a, 0), (*b, 1)].iter() {
                if nodes[input].needs_grad {
                    let d = slot(grads, input, g.len());
                    for (dst, &gv) in d.iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if nodes[*a].needs_grad {
                let d = slot(grads, *a, g.len());
                for (dst, &gv) in d.iter_mut().zip(g) {
                    *dst += gv;
                }
            }
            if nodes[*b].needs_grad {
                let d = slot(grads, *b, g.len());
                for (dst, &gv) in d.iter_mut().zip(g) {
                    *dst -= gv;
                }
            }
        }
        Op::Mul { a, b } => {
            if nodes[*a].needs_grad {
                let bv = &nodes[*b].value;
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            }
            if nodes[*b].needs_grad {
                let av = &nodes[*a].value;
                let d = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            }
        }
        Op::AddSuffix { a, b } => {
            if nodes[*a].needs_grad {
                let d = slot(grads, *a, g.len());
                for (dst, &gv) in d.iter_mut().zip(g) {
                    *dst += gv;
                }
            }
            if nodes[*b].needs_grad {
                let block = nodes[*b].value.len().max(1);
                let d = slot(grads, *b, block);
                for (i, &gv) in g.iter().enumerate() {
                    d[i % block] += gv;
                }
            }
        }
        Op::MulAxisVec { a, v, axis } => {
            let shape = &nodes[*a].shape;
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[*axis];
            if nodes[*a].needs_grad {
                let vv = &nodes[*v].value;
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * vv[(i / inner) % len];
                }
            }
            if nodes[*v].needs_grad {
                let av = &nodes[*a].value;
                let d = slot(grads, *v, len);
                for i in 0..g.len() {
                    d[(i / inner) % len] += g[i] * av[i];
                }
            }
        }
        Op::Scale { a, factor } => {
            if nodes[*a].needs_grad {
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * *factor;
                }
            }
        }
        Op::AddScalar { a } => {
            if nodes[*a].needs_grad {
                let d = slot(grads, *a, g.len());
                for (dst, &gv) in d.iter_mut().zip(g) {
                    *dst += gv;
                }
            }
        }
        Op::MatMul { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let (m, ka) = (
                na.shape[na.shape.len() - 2],
                na.shape[na.shape.len() - 1],
            );
            let n = nb.shape[nb.shape.len() - 1];
            let pa: usize = na.shape[..na.shape.len() - 2].iter().product();
            let pb: usize = nb.shape[..nb.shape.len() - 2].iter().product();
            let po = g.len() / (m * n);
            if na.needs_grad {
                let d = slot(grads, *a, na.value.len());
                for ob in 0..po {
                    let ia = if pa == po { ob } else { ob % pa };
                    let ib = if pb == po { ob } else { ob % pb };
                    let gv = &g[ob * m * n..(ob + 1) * m * n];
                    let bv = &nb.value[ib * ka * n..(ib + 1) * ka * n];
                    let da = &mut d[ia * m * ka..(ia + 1) * m * ka];
                    // da[i, k] += sum_j g[i, j] * b[k, j]
                    for i in 0..m {
                        for k in 0..ka {
                            let mut acc = T::zero();
                            let grow = &gv[i * n..(i + 1) * n];
                            let brow = &bv[k * n..(k + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * ka + k] += acc;
                        }
                    }
                }
            }
            if nb.needs_grad {
                let d = slot(grads, *b, nb.value.len());
                for ob in 0..po {
                    let ia = if pa == po { ob } else { ob % pa };
                    let ib = if pb == po { ob } else { ob % pb };
                    let gv = &g[ob * m * n..(ob + 1) * m * n];
                    let av = &na.value[ia * m * ka..(ia + 1) * m * ka];
                    let db = &mut d[ib * ka * n..(ib + 1) * ka * n];
                    // db[k, j] += sum_i a[i, k] * g[i, j]
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        for k in 0..ka {
                            let x = av[i * ka + k];
                            if x == T::zero() {
                                continue;
                            }
                            let drow = &mut db[k * n..(k + 1) * n];
                            for j in 0..n {
                                drow[j] += x * grow[j];
                            }
                        }
                    }
                }
            }
        }
        Op::TransposeLast2 { a } => {
            if nodes[*a].needs_grad {
                let shape = &nodes[*a].shape;
                let nd = shape.len();
                let (r, c) = (shape[nd - 2], shape[nd - 1]);
                let batch: usize = shape[..nd - 2].iter().product();
                let d = slot(grads, *a, g.len());
                for bi in 0..batch {
                    let gv = &g[bi * r * c..(bi + 1) * r * c];
                    let dv = &mut d[bi * r * c..(bi + 1) * r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dv[i * c + j] += gv[j * r + i];
                        }
                    }
                }
            }
        }
        Op::Permute { a, axes } => {
            if nodes[*a].needs_grad {
                // The adjoint applies the inverse permutation to g.
                let nd = axes.len();
                let mut inv = vec![0usize; nd];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let out_shape: Vec<usize> =
                    axes.iter().map(|&ax| nodes[*a].shape[ax]).collect();
                let back = permute_data(g, &out_shape, &inv, &nodes[*a].shape);
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += back[i];
                }
            }
        }
        Op::Reshape { a } => {
            if nodes[*a].needs_grad {
                let d = slot(grads, *a, g.len());
                for (dst, &gv) in d.iter_mut().zip(g) {
                    *dst += gv;
                }
            }
        }
        Op::Sigmoid { a } => {
            if nodes[*a].needs_grad {
                let y = &node.value;
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
        }
        Op::Gelu { a } => {
            if nodes[*a].needs_grad {
                let x = &nodes[*a].value;
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * gelu_derivative(x[i]);
                }
            }
        }
        Op::SoftmaxLast { a } => {
            if nodes[*a].needs_grad {
                let y = &node.value;
                let c = node.shape[node.shape.len() - 1];
                let rows = y.len() / c.max(1);
                let d = slot(grads, *a, g.len());
                for r in 0..rows {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot += gr[j] * yr[j];
                    }
                    let dr = &mut d[r * c..(r + 1) * c];
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, gamma, beta, eps } => {
            let na = &nodes[*a];
            let c = na.shape[na.shape.len() - 1];
            let rows = na.value.len() / c;
            let inv_c = T::one() / T::from_f64(c as f64);
            let gv = &nodes[*gamma].value;
            // Stats are cheap to recompute and keep the node small.
            for r in 0..rows {
                let x = &na.value[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mut mean = T::zero();
                for &xv in x {
                    mean += xv;
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for &xv in x {
                    let dxv = xv - mean;
                    var += dxv * dxv;
                }
                var = var * inv_c;
                let rstd = T::one() / (var + *eps).sqrt();

                if nodes[*gamma].needs_grad {
                    let d = slot(grads, *gamma, c);
                    for j in 0..c {
                        d[j] += gr[j] * (x[j] - mean) * rstd;
                    }
                }
                if nodes[*beta].needs_grad {
                    let d = slot(grads, *beta, c);
                    for j in 0..c {
                        d[j] += gr[j];
                    }
                }
                if na.needs_grad {
                    let mut mean_gg = T::zero();
                    let mut mean_ggx = T::zero();
                    for j in 0..c {
                        let gg = gr[j] * gv[j];
                        let xh = (x[j] - mean) * rstd;
                        mean_gg += gg;
                        mean_ggx += gg * xh;
                    }
                    mean_gg = mean_gg * inv_c;
                    mean_ggx = mean_ggx * inv_c;
                    let d = slot(grads, *a, na.value.len());
                    let dr = &mut d[r * c..(r + 1) * c];
                    for j in 0..c {
                        let gg = gr[j] * gv[j];
                        let xh = (x[j] - mean) * rstd;
                        dr[j] += rstd * (gg - mean_gg - xh * mean_ggx);
                    }
                }
            }
        }
        Op::MeanAxis { a, axis } => {
            if nodes[*a].needs_grad {
                let shape = &nodes[*a].shape;
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let inv = T::one() / T::from_f64(len as f64);
                let d = slot(grads, *a, nodes[*a].value.len());
                for o in 0..outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let dr = &mut d[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for j in 0..inner {
                            dr[j] += gr[j] * inv;
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if nodes[*a].needs_grad {
                let gv = g[0];
                let d = slot(grads, *a, nodes[*a].value.len());
                for dst in d.iter_mut() {
                    *dst += gv;
                }
            }
        }
        Op::ConcatLast { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let nd = na.shape.len();
            let (ca, cb) = (na.shape[nd - 1], nb.shape[nd - 1]);
            let rows: usize = na.shape[..nd - 1].iter().product();
            let cc = ca + cb;
            if na.needs_grad {
                let d = slot(grads, *a, na.value.len());
                for r in 0..rows {
                    for j in 0..ca {
                        d[r * ca + j] += g[r * cc + j];
                    }
                }
            }
            if nb.needs_grad {
                let d = slot(grads, *b, nb.value.len());
                for r in 0..rows {
                    for j in 0..cb {
                        d[r * cb + j] += g[r * cc + ca + j];
                    }
                }
            }
        }
        Op::SliceLastPrefix { a } => {
            if nodes[*a].needs_grad {
                let shape = &nodes[*a].shape;
                let nd = shape.len();
                let c = shape[nd - 1];
                let width = node.shape[nd - 1];
                let rows: usize = shape[..nd - 1].iter().product();
                let d = slot(grads, *a, nodes[*a].value.len());
                for r in 0..rows {
                    for j in 0..width {
                        d[r * c + j] += g[r * width + j];
                    }
                }
            }
        }
        Op::Interp { a, lengths } => {
            if nodes[*a].needs_grad {
                let shape = &nodes[*a].shape;
                let nd = shape.len();
                let t_in = shape[nd - 2];
                let c = shape[nd - 1];
                let lead: usize = shape[..nd - 2].iter().product();
                let out_len = node.shape[nd - 2];
                let d = slot(grads, *a, nodes[*a].value.len());
                for li in 0..lead {
                    let ll = lengths.as_ref().map_or(t_in, |ls| ls[li]);
                    for j in 0..out_len {
                        let p = if out_len == 1 {
                            0.0
                        } else {
                            j as f64 * (ll - 1) as f64 / (out_len - 1) as f64
                        };
                        let i0 = p.floor() as usize;
                        let w = p - i0 as f64;
                        let gr = &g[(li * out_len + j) * c..(li * out_len + j + 1) * c];
                        if w == 0.0 {
                            let dr = &mut d[(li * t_in + i0) * c..(li * t_in + i0 + 1) * c];
                            for ch in 0..c {
                                dr[ch] += gr[ch];
                            }
                        } else {
                            let i1 = (i0 + 1).min(ll - 1);
                            let wt = T::from_f64(w);
                            let wo = T::one() - wt;
                            for ch in 0..c {
                                d[(li * t_in + i0) * c + ch] += wo * gr[ch];
                                d[(li * t_in + i1) * c + ch] += wt * gr[ch];
                            }
                        }
                    }
                }
            }
        }
        Op::ExpandLeading { a } => {
            if nodes[*a].needs_grad {
                let len = nodes[*a].value.len();
                let copies = g.len() / len;
                let d = slot(grads, *a, len);
                for cp in 0..copies {
                    let gr = &g[cp * len..(cp + 1) * len];
                    for i in 0..len {
                        d[i] += gr[i];
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if nodes[*table].needs_grad {
                let width = nodes[*table].shape[1];
                let d = slot(grads, *table, nodes[*table].value.len());
                for (i, &id) in ids.iter().enumerate() {
                    let r = id as usize;
                    for j in 0..width {
                        d[r * width + j] += g[i * width + j];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, counted } => {
            if nodes[*logits].needs_grad {
                let nl = &nodes[*logits];
                let c = nl.shape[1];
                let scale = g[0] / T::from_f64(*counted as f64);
                let d = slot(grads, *logits, nl.value.len());
                for (i, &label) in labels.iter().enumerate() {
                    if label < 0 {
                        continue;
                    }
                    let row = &nl.value[i * c..(i + 1) * c];
                    let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
                    let mut sum = T::zero();
                    for &x in row {
                        sum += (x - m).exp();
                    }
                    let dr = &mut d[i * c..(i + 1) * c];
                    for j in 0..c {
                        let p = (row[j] - m).exp() / sum;
                        let target = if j as i64 == label { T::one() } else { T::zero() };
                        dr[j] += scale * (p - target);
                    }
                }
            }
        }
        Op::Dropout { a, mask, keep_scale } => {
            if nodes[*a].needs_grad {
                let d = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if mask[i] {
                        d[i] += g[i] * *keep_scale;
                    }
                }
            }
        }
    }
}
