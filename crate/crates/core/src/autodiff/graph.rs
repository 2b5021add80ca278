use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use super::array::{numel, Array};
use super::kernels::{gemm, Mat};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::so3;

/// Backward rule of a user-defined op: `(inputs, output, output_grad) -> input grads`.
pub type BackwardFn = Box<dyn Fn(&[&Array], &Array, &Array) -> Vec<Array>>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Tanh,
    Sin,
    Cos,
    Sqrt,
    Reciprocal,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize },
    Unary(Var, Unary),
    Huber(Var, f64),
    Embedding { table: Var, indices: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    So3Exp(Var),
    GramSchmidt(Var),
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
    /// Op-specific saved values (e.g. inverse std for layer norm).
    cache: Vec<f64>,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order; [`Graph::backward`] walks it once in
/// reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in parameter-id order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Array)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into `store` and returns the ids that
    /// took part in the graph.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Vec<ParamId> {
        let mut touched = Vec::with_capacity(self.params.len());
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.get_mut(id).grad.add_assign(g);
            }
            touched.push(id);
        }
        touched
    }
}

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, &[axis]));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

/// Number of times `rhs` repeats to cover `lhs` when `rhs` is a trailing
/// suffix of `lhs`.
fn suffix_repeats(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return None;
    }
    Some(numel(&lhs[..lhs.len() - rhs.len()]))
}

fn reduce_to(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let n = numel(shape);
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks_exact(n) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Array::new(shape.to_vec(), out).expect("reduced shape")
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_array(x: &Array, perm: &[usize]) -> Array {
    let shape = x.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    if nd == 0 {
        return x.clone();
    }
    let last = out_shape[nd - 1];
    let last_stride = src[nd - 1];
    let mut idx = vec![0usize; nd];
    let data = x.data();
    while out.len() < total {
        let base: usize = (0..nd - 1).map(|d| idx[d] * src[d]).sum();
        for j in 0..last {
            out.push(data[base + j * last_stride]);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array::new(out_shape, out).expect("permuted shape")
}

struct MatmulDims {
    batch_l: usize,
    batch_r: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let bl = &a[..a.len() - 2];
    let br = &b[..b.len() - 2];
    suffix_repeats(bl, br).ok_or_else(err)?;
    let mut out_shape = bl.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        batch_l: numel(bl),
        batch_r: numel(br),
        m,
        k,
        n,
        out_shape,
    })
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn huber(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() <= delta {
        (0.5 * x * x, x)
    } else {
        (delta * (x.abs() - 0.5 * delta), delta * x.signum())
    }
}

fn mat3_at(data: &[f64], b: usize) -> Matrix3<f64> {
    Matrix3::from_row_slice(&data[b * 9..b * 9 + 9])
}

fn push_mat3(out: &mut Vec<f64>, m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            out.push(m[(r, c)]);
        }
    }
}

/// `A'(t)/t` and `B'(t)/t` for the Rodrigues coefficients `A = sin t / t`,
/// `B = (1 - cos t)/t²`.
fn rodrigues_derivative_coefficients(theta: f64) -> (f64, f64) {
    if theta < 1e-2 {
        let t2 = theta * theta;
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta * theta * theta;
        (
            (theta * c - s) / t3,
            (theta * s - 2.0 * (1.0 - c)) / (t3 * theta),
        )
    }
}

fn so3_exp_backward(w: &[f64], g: &[f64]) -> Vec<f64> {
    let n = w.len() / 3;
    let mut out = Vec::with_capacity(w.len());
    let basis = [
        so3::hat(&Vector3::x()),
        so3::hat(&Vector3::y()),
        so3::hat(&Vector3::z()),
    ];
    for b in 0..n {
        let wv = Vector3::new(w[3 * b], w[3 * b + 1], w[3 * b + 2]);
        let gm = mat3_at(g, b);
        let theta = wv.norm();
        let (ca, cb) = so3::rodrigues_coefficients(theta);
        let (c1, c2) = rodrigues_derivative_coefficients(theta);
        let k = so3::hat(&wv);
        let k2 = k * k;
        let gk = gm.dot(&k);
        let gk2 = gm.dot(&k2);
        for (i, e) in basis.iter().enumerate() {
            let term = c1 * wv[i] * gk
                + ca * gm.dot(e)
                + c2 * wv[i] * gk2
                + cb * gm.dot(&(e * k + k * e));
            out.push(term);
        }
    }
    out
}

// Forward Gram-Schmidt on columns 0/1; column 2 = c0 x c1. Cache holds
// (n1, n2) per matrix.
fn gram_schmidt_forward(x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len() / 9;
    let mut out = Vec::with_capacity(x.len());
    let mut cache = Vec::with_capacity(2 * n);
    for b in 0..n {
        let m = mat3_at(x, b);
        let a1 = m.column(0).into_owned();
        let a2 = m.column(1).into_owned();
        let n1 = a1.norm();
        if n1 < so3::DEGENERATE_NORM {
            return Err(Error::Degenerate(n1));
        }
        let c1 = a1 / n1;
        let u2 = a2 - c1 * c1.dot(&a2);
        let n2 = u2.norm();
        if n2 < so3::DEGENERATE_NORM {
            return Err(Error::Degenerate(n2));
        }
        let c2 = u2 / n2;
        let r = Matrix3::from_columns(&[c1, c2, c1.cross(&c2)]);
        push_mat3(&mut out, &r);
        cache.extend([n1, n2]);
    }
    Ok((out, cache))
}

fn gram_schmidt_backward(x: &[f64], y: &[f64], cache: &[f64], g: &[f64]) -> Vec<f64> {
    let n = x.len() / 9;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        let a2 = mat3_at(x, b).column(1).into_owned();
        let r = mat3_at(y, b);
        let gm = mat3_at(g, b);
        let (n1, n2) = (cache[2 * b], cache[2 * b + 1]);
        let c1 = r.column(0).into_owned();
        let c2 = r.column(1).into_owned();
        let g3 = gm.column(2).into_owned();
        let mut gc1 = gm.column(0).into_owned() + c2.cross(&g3);
        let gc2 = gm.column(1).into_owned() + g3.cross(&c1);
        let gu2 = (gc2 - c2 * c2.dot(&gc2)) / n2;
        let ga2 = gu2 - c1 * c1.dot(&gu2);
        gc1 -= gu2 * c1.dot(&a2) + a2 * gu2.dot(&c1);
        let ga1 = (gc1 - c1 * c1.dot(&gc1)) / n1;
        let ga = Matrix3::from_columns(&[ga1, ga2, Vector3::zeros()]);
        push_mat3(&mut out, &ga);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.push_cached(value, op, requires_grad, Vec::new())
    }

    fn push_cached(&mut self, value: Array, op: Op, requires_grad: bool, cache: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            cache,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Array, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        let reps = suffix_repeats(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(name, av.shape(), bv.shape()))?;
        let _ = reps;
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        Ok((out, self.rg(a) || self.rg(b)))
    }

    /// `a + b`, where `b` may broadcast as a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary_broadcast(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary_broadcast(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product with trailing-suffix broadcasting of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary_broadcast(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Adds a constant scalar.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::Shift(a), rg)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; the right operand's
    /// batch dims must be a trailing suffix of the left operand's.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; numel(&d.out_shape)];
        if d.batch_r == 1 {
            gemm(
                d.batch_l * d.m,
                d.k,
                d.n,
                Mat::rows(av.data(), d.k),
                Mat::rows(bv.data(), d.n),
                &mut out,
                0.0,
            );
        } else {
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for bi in 0..d.batch_l {
                let rb = bi % d.batch_r;
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    Mat::rows(&av.data()[bi * sa..(bi + 1) * sa], d.k),
                    Mat::rows(&bv.data()[rb * sb..(rb + 1) * sb], d.n),
                    &mut out[bi * sc..(bi + 1) * sc],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::new(d.out_shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.value(a).ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", self.value(a).shape(), perm));
        }
        let v = permute_array(self.value(a), perm);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", self.value(a).shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = axis_split(&base, axis, "concat")?;
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let same = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let block = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Array::new(shape, out)?, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis, "slice")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * n * inner + start * inner;
            out.extend_from_slice(&data[off..off + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Array::new(new_shape, out)?, Op::Slice { x: a, axis, start }, rg))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis, "sum")?;
        let data = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &data[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= n as f64);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(a);
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        Ok(self.push(Array::new(new_shape, out)?, op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Sum of all entries as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis, "softmax")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[at(i)] /= sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Array::new(shape, out)?, Op::Softmax(a, axis), rg))
    }

    /// Layer normalisation without affine parameters (population variance).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis, "layer_norm")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| x[at(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (x[at(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                for i in 0..n {
                    out[at(i)] = (x[at(i)] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let rg = self.rg(a);
        Ok(self.push_cached(Array::new(shape, out)?, Op::LayerNorm { x: a, axis }, rg, inv_std))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => |x| gelu(x).0,
            Unary::Tanh => f64::tanh,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Sqrt => f64::sqrt,
            Unary::Reciprocal => f64::recip,
        };
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, Op::Unary(a, kind), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Reciprocal)
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let v = self.value(a).map(|x| huber(x, delta).0);
        let rg = self.rg(a);
        self.push(v, Op::Huber(a, delta), rg)
    }

    /// Rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= t.shape()[0]) {
            return Err(Error::shape("embedding", t.shape(), indices));
        }
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        let v = Array::new(vec![indices.len(), d], out)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Array::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::Dropout { x: a, mask }, rg)
    }

    /// Batched exponential map `[.., 3] -> [.., 3, 3]`.
    pub fn so3_exp(&mut self, w: Var) -> Result<Var> {
        let x = self.value(w);
        if x.shape().last() != Some(&3) {
            return Err(Error::shape("so3_exp", x.shape(), &[3]));
        }
        let mut out = Vec::with_capacity(x.len() * 3);
        for c in x.data().chunks_exact(3) {
            let r = so3::exp_map(&Vector3::new(c[0], c[1], c[2]));
            push_mat3(&mut out, r.matrix());
        }
        let mut shape = x.shape().to_vec();
        shape.push(3);
        let rg = self.rg(w);
        Ok(self.push(Array::new(shape, out)?, Op::So3Exp(w), rg))
    }

    /// Batched Gram-Schmidt projection `[.., 3, 3] -> [.., 3, 3]`.
    pub fn gram_schmidt(&mut self, m: Var) -> Result<Var> {
        let x = self.value(m);
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 1] != 3 || s[s.len() - 2] != 3 {
            return Err(Error::shape("gram_schmidt", s, &[3, 3]));
        }
        let (out, cache) = gram_schmidt_forward(x.data())?;
        let shape = s.to_vec();
        let rg = self.rg(m);
        Ok(self.push_cached(Array::new(shape, out)?, Op::GramSchmidt(m), rg, cache))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Array, backward: BackwardFn) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.backward_node(node, g, lower);
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }

    fn backward_node(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let mut acc = |v: Var, delta: Array| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    acc(*b, reduce_to(g, val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    acc(*b, reduce_to(g, val(*b).shape()).map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bl = bv.len();
                if wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * bv.data()[i % bl])
                        .collect();
                    acc(*a, Array::new(av.shape().to_vec(), d).expect("shape"));
                }
                if wants(*b) {
                    let prod = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let prod = Array::new(av.shape().to_vec(), prod).expect("shape");
                    acc(*b, reduce_to(&prod, bv.shape()));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let d = matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                if wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    if d.batch_r == 1 {
                        gemm(
                            d.batch_l * d.m,
                            d.n,
                            d.k,
                            Mat::rows(g.data(), d.n),
                            Mat::transposed(bv.data(), d.n),
                            &mut da,
                            0.0,
                        );
                    } else {
                        for bi in 0..d.batch_l {
                            let rb = bi % d.batch_r;
                            gemm(
                                d.m,
                                d.n,
                                d.k,
                                Mat::rows(&g.data()[bi * sc..(bi + 1) * sc], d.n),
                                Mat::transposed(&bv.data()[rb * sb..(rb + 1) * sb], d.n),
                                &mut da[bi * sa..(bi + 1) * sa],
                                0.0,
                            );
                        }
                    }
                    acc(*a, Array::new(av.shape().to_vec(), da).expect("shape"));
                }
                if wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    if d.batch_r == 1 {
                        gemm(
                            d.k,
                            d.batch_l * d.m,
                            d.n,
                            Mat::transposed(av.data(), d.k),
                            Mat::rows(g.data(), d.n),
                            &mut db,
                            0.0,
                        );
                    } else {
                        for bi in 0..d.batch_l {
                            let rb = bi % d.batch_r;
                            gemm(
                                d.k,
                                d.m,
                                d.n,
                                Mat::transposed(&av.data()[bi * sa..(bi + 1) * sa], d.k),
                                Mat::rows(&g.data()[bi * sc..(bi + 1) * sc], d.n),
                                &mut db[rb * sb..(rb + 1) * sb],
                                1.0,
                            );
                        }
                    }
                    acc(*b, Array::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, permute_array(g, &inv));
            }
            Op::Reshape(a) => {
                acc(*a, g.clone().reshape(val(*a).shape()).expect("shape"));
            }
            Op::Concat(inputs, axis) => {
                let shape = g.shape();
                let (outer, total, inner) = axis_split(shape, *axis, "concat").expect("shape");
                let mut offset = 0;
                for &v in inputs {
                    let n = val(v).shape()[*axis];
                    if wants(v) {
                        let mut out = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[s..s + n * inner]);
                        }
                        acc(v, Array::new(val(v).shape().to_vec(), out).expect("shape"));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = axis_split(xs, *axis, "slice").expect("shape");
                let len = g.shape()[*axis];
                let mut out = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*x, Array::new(xs.to_vec(), out).expect("shape"));
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let xs = val(*a).shape();
                let (outer, n, inner) = axis_split(xs, *axis, "sum").expect("shape");
                let scale = if matches!(node.op, Op::Mean(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut out = vec![0.0; val(*a).len()];
                for o in 0..outer {
                    for i in 0..n {
                        let dst = (o * n + i) * inner;
                        for j in 0..inner {
                            out[dst + j] = g.data()[o * inner + j] * scale;
                        }
                    }
                }
                acc(*a, Array::new(xs.to_vec(), out).expect("shape"));
            }
            Op::SumAll(a) => acc(*a, Array::full(val(*a).shape(), g.item())),
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis, "softmax").expect("shape");
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g.data()[at(i)] * y.data()[at(i)]).sum();
                        for i in 0..n {
                            out[at(i)] = y.data()[at(i)] * (g.data()[at(i)] - dot);
                        }
                    }
                }
                acc(*a, Array::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::LayerNorm { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis, "layer_norm").expect("shape");
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let is = node.cache[o * inner + j];
                        let mg = (0..n).map(|i| g.data()[at(i)]).sum::<f64>() / n as f64;
                        let mgy = (0..n)
                            .map(|i| g.data()[at(i)] * y.data()[at(i)])
                            .sum::<f64>()
                            / n as f64;
                        for i in 0..n {
                            out[at(i)] = is * (g.data()[at(i)] - mg - y.data()[at(i)] * mgy);
                        }
                    }
                }
                acc(*x, Array::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::Unary(a, kind) => {
                let x = val(*a).data();
                let y = node.value.data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        gi * match kind {
                            Unary::Gelu => gelu(x[i]).1,
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Sin => x[i].cos(),
                            Unary::Cos => -x[i].sin(),
                            Unary::Sqrt => 0.5 / y[i],
                            Unary::Reciprocal => -y[i] * y[i],
                        }
                    })
                    .collect();
                acc(*a, Array::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Huber(a, delta) => {
                let x = val(*a).data();
                let d = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * huber(xi, *delta).1)
                    .collect();
                acc(*a, Array::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Embedding { table, indices } => {
                let t = val(*table);
                let dim = t.shape()[1];
                let mut out = vec![0.0; t.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..dim {
                        out[i * dim + j] += g.data()[row * dim + j];
                    }
                }
                acc(*table, Array::new(t.shape().to_vec(), out).expect("shape"));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                acc(*x, Array::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::So3Exp(w) => {
                let d = so3_exp_backward(val(*w).data(), g.data());
                acc(*w, Array::new(val(*w).shape().to_vec(), d).expect("shape"));
            }
            Op::GramSchmidt(m) => {
                let d = gram_schmidt_backward(val(*m).data(), node.value.data(), &node.cache, g.data());
                acc(*m, Array::new(val(*m).shape().to_vec(), d).expect("shape"));
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Array> = inputs.iter().map(|&v| val(v)).collect();
                let ds = backward(&ins, &node.value, g);
                for (&v, d) in inputs.iter().zip(ds) {
                    acc(v, d);
                }
            }
        }
    }
}
