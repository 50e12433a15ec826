//! A small reverse-mode autodiff tape over [`Mat`] values.
//!
//! A [`Graph`] borrows one [`ParamStore`]; parameters enter the tape by
//! reference, so building a forward pass never copies weights. Each op records
//! its inputs, and [`Graph::backward`] walks the tape once in reverse.
//!
//! The grouped ops (`group_dot`, `group_weighted_sum`, `group_outer_dot`,
//! `batch_vec_mat`) treat a `[G·n, d]` matrix as `G` consecutive blocks of `n`
//! rows. They carry the per-sample attention, mixing and contrastive
//! computations for a whole batch in one node.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Mat};
use std::collections::HashMap;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    PickCols(Var, Vec<usize>),
    SumAll(Var),
    RowSum(Var),
    MulConst(Var, Mat),
    GroupDot { q: Var, k: Var, n: usize },
    GroupWeightedSum { w: Var, v: Var },
    BatchVecMat { x: Var, w: Var, m: usize },
    GroupOuterDot { a: Var, b: Var, n: usize },
    SoftmaxRows(Var),
    MaskedLse(Var, Vec<bool>),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<(ParamId, Mat)>,
    leaves: HashMap<Var, Mat>,
}

impl Gradients {
    /// Gradients of every parameter that received one, in id order.
    pub fn params(&self) -> &[(ParamId, Mat)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Mat)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient with respect to an input created by [`Graph::input`].
    pub fn input(&self, v: Var) -> Option<&Mat> {
        self.leaves.get(&v)
    }

    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales all parameter gradients so that their joint norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for (_, g) in &mut self.params {
                g.scale_assign(s);
            }
        }
        norm
    }
}

impl<'s> Graph<'s> {
    /// A graph that tracks gradients for parameters of `store`.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::build(Some(store), true)
    }

    /// A graph that never records gradients; parameters are constants.
    pub fn no_grad(store: &'s ParamStore) -> Self {
        Self::build(Some(store), false)
    }

    /// A graph without a parameter store, for pure functions of inputs.
    pub fn detached() -> Graph<'static> {
        Graph::build(None, true)
    }

    fn build(store: Option<&'s ParamStore>, grad_enabled: bool) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            frozen: HashMap::new(),
            grad_enabled,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("graph has no parameter store")
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store().get(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable parameter. Repeated calls return the same node so that
    /// gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let _ = self.store().get(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// A parameter read as a constant: no gradient ever reaches it.
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let _ = self.store().get(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.frozen.insert(id, v);
        v
    }

    /// An input whose gradient is reported by [`Gradients::input`] when
    /// `requires_grad` is set.
    pub fn input(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value out as a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 × c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row bias shape");
        let mut out = av.clone();
        let c = av.cols();
        if c > 0 {
            for row in out.data_mut().chunks_exact_mut(c) {
                for (x, b) in row.iter_mut().zip(bv.data()) {
                    *x += b;
                }
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        let rg = self.rg(a);
        self.push(out, Op::OneMinus(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let c = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + c].copy_from_slice(pv.row(r));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Mat::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let rg = self.rg(a);
        self.push(Mat::from_vec(idx.len(), c, data), Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Picks `a[r, idx[r]]` for every row, giving an `m × 1` column.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows(), "pick_cols index count");
        let data = idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let rg = self.rg(a);
        self.push(Mat::from_vec(idx.len(), 1, data), Op::PickCols(a, idx.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Mat::from_vec(av.rows(), 1, data), Op::RowSum(a), rg)
    }

    /// Elementwise product with a constant (typically a 0/1 mask).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape");
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// `out[g, i] = q[g] · k[g·n + i]`.
    pub fn group_dot(&mut self, q: Var, k: Var, n: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        let g_count = qv.rows();
        assert_eq!(kv.rows(), g_count * n, "group_dot rows");
        assert_eq!(kv.cols(), qv.cols(), "group_dot width");
        let mut out = Mat::zeros(g_count, n);
        for g in 0..g_count {
            let qr = qv.row(g);
            for i in 0..n {
                out.set(g, i, dot(qr, kv.row(g * n + i)));
            }
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(out, Op::GroupDot { q, k, n }, rg)
    }

    /// `out[g] = Σ_i w[g, i] · v[g·n + i]` with `n = w.cols()`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var) -> Var {
        let (wv, vv) = (self.value(w), self.value(v));
        let (g_count, n) = wv.shape();
        assert_eq!(vv.rows(), g_count * n, "group_weighted_sum rows");
        let d = vv.cols();
        let mut out = Mat::zeros(g_count, d);
        for g in 0..g_count {
            let orow = out.row_mut(g);
            for i in 0..n {
                let a = wv.get(g, i);
                for (o, x) in orow.iter_mut().zip(vv.row(g * n + i)) {
                    *o += a * x;
                }
            }
        }
        let rg = self.rg(w) || self.rg(v);
        self.push(out, Op::GroupWeightedSum { w, v }, rg)
    }

    /// Per-row vector–matrix product: `out[g, j] = Σ_i x[g, i] · w[g, i·m + j]`.
    pub fn batch_vec_mat(&mut self, x: Var, w: Var, m: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (g_count, n) = xv.shape();
        assert_eq!(wv.shape(), (g_count, n * m), "batch_vec_mat weight shape");
        let mut out = Mat::zeros(g_count, m);
        for g in 0..g_count {
            let wr = wv.row(g);
            let orow = out.row_mut(g);
            for i in 0..n {
                let a = xv.get(g, i);
                for (o, x) in orow.iter_mut().zip(&wr[i * m..(i + 1) * m]) {
                    *o += a * x;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::BatchVecMat { x, w, m }, rg)
    }

    /// `out[g·n + i, j] = a[g·n + i] · b[g·n + j]`.
    pub fn group_outer_dot(&mut self, a: Var, b: Var, n: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "group_outer_dot shape");
        assert_eq!(av.rows() % n, 0, "group_outer_dot group size");
        let mut out = Mat::zeros(av.rows(), n);
        for g in 0..av.rows() / n {
            for i in 0..n {
                for j in 0..n {
                    out.set(g * n + i, j, dot(av.row(g * n + i), bv.row(g * n + j)));
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::GroupOuterDot { a, b, n }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let c = av.cols();
        if c > 0 {
            for row in out.data_mut().chunks_exact_mut(c) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise `log Σ_{j: mask[r, j]} exp(a[r, j])`, stabilized by the row
    /// maximum over masked entries. Every row needs at least one masked entry.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.len(), "mask size");
        let c = av.cols();
        let mut data = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = av.row(r);
            let m = &mask[r * c..(r + 1) * c];
            data.push(masked_lse(row, m));
        }
        let out = Mat::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::MaskedLse(a, mask), rg)
    }

    /// Reverse pass from a scalar (`1 × 1`) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        let mut leaves = HashMap::new();
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match node.param {
                        Some(id) => params.push((id, g)),
                        None => {
                            leaves.insert(Var(idx), g);
                        }
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        acc_gemm(&mut grads, *a, &g, false, bv, true);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        acc_gemm(&mut grads, *b, av, true, &g, false);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        let c = g.cols();
                        let mut gb = Mat::zeros(1, c);
                        if c > 0 {
                            for row in g.data().chunks_exact(c) {
                                for (s, x) in gb.data_mut().iter_mut().zip(row) {
                                    *s += x;
                                }
                            }
                        }
                        acc(&mut grads, *bias, gb);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::OneMinus(a) => acc(&mut grads, *a, g.map(|x| -x)),
                Op::Relu(a) => {
                    let y = self.value(Var(idx));
                    let ga = elementwise(&g, y, |gx, yx| if yx > 0.0 { gx } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    let ga = elementwise(&g, y, |gx, yx| gx * yx * (1.0 - yx));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let ga = elementwise(&g, y, |gx, yx| gx * (1.0 - yx * yx));
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let ga = elementwise(&g, x, |gx, xx| {
                        if xx > 0.0 {
                            gx
                        } else if xx < 0.0 {
                            -gx
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.rg(p) {
                            let mut gp = Mat::zeros(g.rows(), c);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        off += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    let c = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + c].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    let c = g.cols();
                    for &p in parts {
                        let r = self.value(p).rows();
                        if self.rg(p) {
                            let gp = Mat::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                            acc(&mut grads, p, gp);
                        }
                        off += r;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let target = grads[a.0].get_or_insert_with(|| Mat::zeros(av.rows(), c));
                    let dst = &mut target.data_mut()[start * c..start * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::GatherRows(a, idx_list) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let target = grads[a.0].get_or_insert_with(|| Mat::zeros(av.rows(), c));
                    for (r, &i) in idx_list.iter().enumerate() {
                        for (d, s) in target.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, g.reshaped(r, c));
                }
                Op::PickCols(a, cols) => {
                    let av = self.value(*a);
                    let target = grads[a.0].get_or_insert_with(|| Mat::zeros(av.rows(), av.cols()));
                    for (r, &c) in cols.iter().enumerate() {
                        let v = target.get(r, c) + g.get(r, 0);
                        target.set(r, c, v);
                    }
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::filled(r, c, g.get(0, 0)));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).fill(g.get(i, 0));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MulConst(a, m) => {
                    let ga = elementwise(&g, m, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                }
                Op::GroupDot { q, k, n } => {
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let n = *n;
                    if self.rg(*q) {
                        let mut gq = Mat::zeros(qv.rows(), qv.cols());
                        for gi in 0..qv.rows() {
                            let row = gq.row_mut(gi);
                            for i in 0..n {
                                let s = g.get(gi, i);
                                for (d, x) in row.iter_mut().zip(kv.row(gi * n + i)) {
                                    *d += s * x;
                                }
                            }
                        }
                        acc(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        let mut gk = Mat::zeros(kv.rows(), kv.cols());
                        for gi in 0..qv.rows() {
                            for i in 0..n {
                                let s = g.get(gi, i);
                                for (d, x) in gk.row_mut(gi * n + i).iter_mut().zip(qv.row(gi)) {
                                    *d = s * x;
                                }
                            }
                        }
                        acc(&mut grads, *k, gk);
                    }
                }
                Op::GroupWeightedSum { w, v } => {
                    let (wv, vv) = (self.value(*w), self.value(*v));
                    let (g_count, n) = wv.shape();
                    if self.rg(*w) {
                        let mut gw = Mat::zeros(g_count, n);
                        for gi in 0..g_count {
                            for i in 0..n {
                                gw.set(gi, i, dot(g.row(gi), vv.row(gi * n + i)));
                            }
                        }
                        acc(&mut grads, *w, gw);
                    }
                    if self.rg(*v) {
                        let mut gv = Mat::zeros(vv.rows(), vv.cols());
                        for gi in 0..g_count {
                            for i in 0..n {
                                let a = wv.get(gi, i);
                                for (d, x) in gv.row_mut(gi * n + i).iter_mut().zip(g.row(gi)) {
                                    *d = a * x;
                                }
                            }
                        }
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::BatchVecMat { x, w, m } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (g_count, n) = xv.shape();
                    let m = *m;
                    if self.rg(*x) {
                        let mut gx = Mat::zeros(g_count, n);
                        for gi in 0..g_count {
                            let wr = wv.row(gi);
                            for i in 0..n {
                                gx.set(gi, i, dot(g.row(gi), &wr[i * m..(i + 1) * m]));
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        let mut gw = Mat::zeros(g_count, n * m);
                        for gi in 0..g_count {
                            let grow = g.row(gi).to_vec();
                            let wrow = gw.row_mut(gi);
                            for i in 0..n {
                                let a = xv.get(gi, i);
                                for (d, s) in wrow[i * m..(i + 1) * m].iter_mut().zip(&grow) {
                                    *d = a * s;
                                }
                            }
                        }
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::GroupOuterDot { a, b, n } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = *n;
                    let groups = av.rows() / n;
                    if self.rg(*a) {
                        let mut ga = Mat::zeros(av.rows(), av.cols());
                        for gi in 0..groups {
                            for i in 0..n {
                                let r = gi * n + i;
                                for j in 0..n {
                                    let s = g.get(r, j);
                                    for (d, x) in ga.row_mut(r).iter_mut().zip(bv.row(gi * n + j)) {
                                        *d += s * x;
                                    }
                                }
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Mat::zeros(bv.rows(), bv.cols());
                        for gi in 0..groups {
                            for j in 0..n {
                                let r = gi * n + j;
                                for i in 0..n {
                                    let s = g.get(gi * n + i, j);
                                    for (d, x) in gb.row_mut(r).iter_mut().zip(av.row(gi * n + i)) {
                                        *d += s * x;
                                    }
                                }
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let c = y.cols();
                    let mut ga = Mat::zeros(y.rows(), c);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = dot(yr, gr);
                        for ((d, &yy), &gg) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yy * (gg - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedLse(a, mask) => {
                    let av = self.value(*a);
                    let lse = self.value(Var(idx));
                    let c = av.cols();
                    let mut ga = Mat::zeros(av.rows(), c);
                    for r in 0..av.rows() {
                        let l = lse.get(r, 0);
                        let gr = g.get(r, 0);
                        let m = &mask[r * c..(r + 1) * c];
                        for (j, d) in ga.row_mut(r).iter_mut().enumerate() {
                            if m[j] {
                                *d = gr * (av.get(r, j) - l).exp();
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients { params, leaves }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stable log-sum-exp over the entries selected by `mask`.
pub(crate) fn masked_lse(row: &[f64], mask: &[bool]) -> f64 {
    let mx = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| (x - mx).exp())
        .sum();
    mx + s.ln()
}

fn elementwise(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_gemm(grads: &mut [Option<Mat>], v: Var, a: &Mat, ta: bool, b: &Mat, tb: bool) {
    let rows = if ta { a.cols() } else { a.rows() };
    let cols = if tb { b.rows() } else { b.cols() };
    match &mut grads[v.0] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut out = Mat::zeros(rows, cols);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares the gradient of `f` w.r.t. each input against central
    /// differences.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph<'static>, &[Var]) -> Var) {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Mat]| {
            let mut g = Graph::detached();
            let vars: Vec<Var> = ins.iter().map(|m| g.input(m.clone(), false)).collect();
            let o = f(&mut g, &vars);
            g.value(o).get(0, 0)
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads
                .input(vars[k])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()));
            for e in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!(
                    (a - num).abs() / denom < 1e-5,
                    "input {k} entry {e}: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 5);
        let b = rand_mat(&mut rng, 1, 5);
        check(vec![x, w, b], |g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row(h, v[2]);
            let s = g.sigmoid(h);
            let t = g.tanh(h);
            let om = g.one_minus(s);
            let p = g.mul(om, t);
            let a = g.abs(p);
            let r = g.relu(h);
            let q = g.add(a, r);
            let q = g.sub(q, s);
            let q = g.scale(q, 0.7);
            g.mean(q)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 4, 2);
        check(vec![a, b], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]]);
            let s = g.slice_cols(c, 1, 3);
            let r = g.concat_rows(&[s, s]);
            let r = g.slice_rows(r, 2, 5);
            let gr = g.gather_rows(r, &[0, 4, 4, 2]);
            let p = g.pick_cols(gr, &[0, 2, 1, 1]);
            let p = g.reshape(p, 2, 2);
            let rs = g.row_sum(p);
            let m = g.mul_const(rs, Mat::from_vec(2, 1, vec![1.5, -0.5]));
            let sq = g.mul(m, m);
            g.sum(sq)
        });
    }

    #[test]
    fn grouped_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 3;
        let q = rand_mat(&mut rng, 2, 4);
        let k = rand_mat(&mut rng, 2 * n, 4);
        let vals = rand_mat(&mut rng, 2 * n, 5);
        check(vec![q, k, vals], |g, v| {
            let logits = g.group_dot(v[0], v[1], n);
            let a = g.softmax_rows(logits);
            let o = g.group_weighted_sum(a, v[2]);
            let o2 = g.mul(o, o);
            g.sum(o2)
        });

        let x = rand_mat(&mut rng, 2, 3);
        let w = rand_mat(&mut rng, 2, 3 * 4);
        check(vec![x, w], |g, v| {
            let o = g.batch_vec_mat(v[0], v[1], 4);
            let t = g.tanh(o);
            g.sum(t)
        });

        let a = rand_mat(&mut rng, 2 * n, 4);
        let b = rand_mat(&mut rng, 2 * n, 4);
        let mask: Vec<bool> = (0..2 * n * n).map(|i| i % 3 != 1).collect();
        check(vec![a, b], move |g, v| {
            let s = g.group_outer_dot(v[0], v[1], n);
            let l = g.masked_logsumexp(s, mask.clone());
            g.sum(l)
        });
    }

    #[test]
    fn params_accumulate_across_uses_and_frozen_get_none() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(1, 1, vec![2.0]));
        let k = store.add("k", Mat::from_vec(1, 1, vec![3.0]));
        let mut g = Graph::new(&store);
        let x = g.input(Mat::from_vec(1, 1, vec![5.0]), false);
        let w1 = g.param(w);
        let w2 = g.param(w);
        assert_eq!(w1, w2);
        let kv = g.frozen_param(k);
        let a = g.matmul(x, w1);
        let b = g.matmul(a, w2);
        let c = g.matmul(b, kv);
        let grads = g.backward(c);
        // c = 5 w^2 k, dc/dw = 10 w k = 60
        assert_eq!(grads.param(w).unwrap().get(0, 0), 60.0);
        assert!(grads.param(k).is_none());
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(1, 1, vec![2.0]));
        let mut g = Graph::no_grad(&store);
        let p = g.param(w);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert!(grads.params().is_empty());
    }
}
