//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Forward ops record their inputs; [`Tape::backward`] walks the tape in
//! reverse and accumulates adjoints. Trainable tensors live in a
//! [`ParamSet`] and are pulled onto a tape with [`Tape::param`]; after a
//! backward pass [`Tape::param_grads`] hands their gradients back in
//! `ParamSet` order.
//!
//! The op set is exactly what the block encoder and the set aggregator need,
//! including two fused kernels: the linear-recurrent state scan ([`Tape::wkv`])
//! and row-wise cross entropy.

use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect()
    }
}

/// Sum per-tensor gradients from several tapes, in slice order.
pub fn accumulate(into: &mut [Matrix], from: &[Matrix]) {
    for (a, b) in into.iter_mut().zip(from) {
        a.add_assign(b);
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    SqrtEps(Var),
    Huber(Var, f64),
    LayerNorm { x: Var, xhat: Matrix, inv_std: Vec<f64> },
    SoftmaxRows { x: Var, mask: Option<Vec<bool>> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    ShiftDown(Var),
    Wkv { r: Var, k: Var, v: Var, w: Var, states: Vec<f64> },
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    PairwiseDist(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub const SQRT_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    param_cache: Vec<Option<Var>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter onto the tape once; later calls reuse the node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if self.param_cache.len() <= id.0 {
            self.param_cache.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_cache[id.0] {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id));
        self.param_cache[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols), rv.shape(), "add_row shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols), rv.shape(), "mul_row shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(x, row))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// `sqrt(x + SQRT_EPS)`, smooth at zero distance.
    pub fn sqrt_eps(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| (v + SQRT_EPS).sqrt());
        self.push(out, Op::SqrtEps(x))
    }

    /// Elementwise Huber penalty of residuals.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        let out = self.value(x).map(|r| huber(r, delta));
        self.push(out, Op::Huber(x, delta))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let n = xv.cols as f64;
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNorm { x, xhat, inv_std })
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get probability 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Var {
        let xv = self.value(x);
        if let Some(m) = &mask {
            assert_eq!(m.len(), xv.cols, "softmax mask length");
            assert!(m.iter().any(|&b| b), "softmax over fully masked row");
        }
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[c]);
            let max = (0..xv.cols).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let o = out.row_mut(r);
            for c in 0..row.len() {
                if keep(c) {
                    o[c] = (row[c] - max).exp();
                    z += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, Op::SoftmaxRows { x, mask })
    }

    /// Sum over rows of `-log softmax(logits)[target]`; rows whose target is
    /// `None` are ignored. Returns a `1 × 1` node.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logit row");
        let mut probs = Matrix::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            if let Some(t) = *t {
                assert!(t < lv.cols, "target {t} out of range for {} classes", lv.cols);
                total += lse - row[t];
            }
        }
        self.push(Matrix::filled(1, 1, total), Op::CrossEntropy { logits, targets, probs })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(start + width <= xv.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(xv.rows, width);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Row lookup: output row `t` is `x[ids[t]]`.
    pub fn gather(&mut self, x: Var, ids: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(ids.len(), xv.cols);
        for (t, &i) in ids.iter().enumerate() {
            assert!(i < xv.rows, "gather index {i} out of range for {} rows", xv.rows);
            out.row_mut(t).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::Gather(x, ids))
    }

    /// Row `t` becomes row `t-1`; row 0 is zero.
    pub fn shift_down(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for t in 1..xv.rows {
            out.row_mut(t).copy_from_slice(xv.row(t - 1));
        }
        self.push(out, Op::ShiftDown(x))
    }

    /// Linear-recurrent scan with an outer-product state.
    ///
    /// `S_t = diag(w_t) S_{t-1} + k_t v_tᵀ`, `o_t = r_tᵀ S_t`, `S_0 = 0`.
    /// All inputs are `N × d`; `r` and `w` are expected post-sigmoid.
    pub fn wkv(&mut self, r: Var, k: Var, v: Var, w: Var) -> Var {
        let (n, d) = self.value(r).shape();
        for x in [k, v, w] {
            assert_eq!(self.value(x).shape(), (n, d), "wkv shape mismatch");
        }
        let (rv, kv, vv, wv) = (self.value(r), self.value(k), self.value(v), self.value(w));
        let mut states = vec![0.0; n * d * d];
        let mut out = Matrix::zeros(n, d);
        let mut prev = vec![0.0; d * d];
        for t in 0..n {
            let cur = &mut states[t * d * d..(t + 1) * d * d];
            let (rt, kt, vt, wt) = (rv.row(t), kv.row(t), vv.row(t), wv.row(t));
            let ot = out.row_mut(t);
            for i in 0..d {
                let srow = &mut cur[i * d..(i + 1) * d];
                let prow = &prev[i * d..(i + 1) * d];
                for j in 0..d {
                    srow[j] = wt[i] * prow[j] + kt[i] * vt[j];
                }
                let ri = rt[i];
                for j in 0..d {
                    ot[j] += ri * srow[j];
                }
            }
            prev.copy_from_slice(cur);
        }
        self.push(out, Op::Wkv { r, k, v, w, states })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `n × m → 1 × m`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(x))
    }

    /// Row sums: `n × m → n × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.row(r).iter().sum()).collect();
        self.push(Matrix::from_vec(xv.rows, 1, data), Op::SumCols(x))
    }

    /// Scales each row to unit L2 norm (norm taken as `sqrt(|x|² + SQRT_EPS)`).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let n = (xv.row(r).iter().map(|v| v * v).sum::<f64>() + SQRT_EPS).sqrt();
            for o in out.row_mut(r) {
                *o /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    /// `D[i][j] = sqrt(|z_i - z_j|² + SQRT_EPS)` for all row pairs.
    pub fn pairwise_dist(&mut self, z: Var) -> Var {
        let zv = self.value(z);
        let n = zv.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let d2: f64 = zv.row(i).iter().zip(zv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                out.set(i, j, (d2 + SQRT_EPS).sqrt());
            }
        }
        self.push(out, Op::PairwiseDist(z))
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        self.backward_with(loss, Matrix::filled(1, 1, 1.0));
    }

    /// Reverse pass seeded with an explicit adjoint for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Matrix) {
        assert_eq!(self.value(root).shape(), seed.shape(), "seed shape mismatch");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    fn acc(&mut self, v: Var, delta: Matrix) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) {
        // Split borrows: inputs are always earlier on the tape.
        let (before, rest) = self.nodes.split_at(idx);
        let node = &rest[0];
        let val = |v: Var| &before[v.0].value;
        let y = &node.value;
        let mut pending: Vec<(Var, Matrix)> = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                pending.push((*a, g.matmul_bt(val(*b))));
                pending.push((*b, val(*a).matmul_at(g)));
            }
            Op::MatMulBt(a, b) => {
                pending.push((*a, g.matmul(val(*b))));
                pending.push((*b, g.matmul_at(val(*a))));
            }
            Op::Transpose(a) => pending.push((*a, g.transpose())),
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                pending.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                pending.push((*b, g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::AddRow(x, row) => {
                pending.push((*x, g.clone()));
                let mut dr = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in dr.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                pending.push((*row, dr));
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(*x), val(*row));
                let mut dx = g.clone();
                let mut dr = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    let (gr, xr) = (g.row(r), xv.row(r));
                    for c in 0..g.cols {
                        dr.data[c] += gr[c] * xr[c];
                    }
                    for (o, b) in dx.row_mut(r).iter_mut().zip(&rv.data) {
                        *o *= b;
                    }
                }
                pending.push((*x, dx));
                pending.push((*row, dr));
            }
            Op::Affine(x, s) => pending.push((*x, g.map(|v| v * s))),
            Op::Sigmoid(x) => pending.push((*x, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)))),
            Op::Tanh(x) => pending.push((*x, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)))),
            Op::Silu(x) => pending.push((
                *x,
                g.zip_map(val(*x), |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (1.0 - s))
                }),
            )),
            Op::Softplus(x) => pending.push((*x, g.zip_map(val(*x), |gi, xi| gi * sigmoid(xi)))),
            Op::Relu(x) => pending.push((*x, g.zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 }))),
            Op::Square(x) => pending.push((*x, g.zip_map(val(*x), |gi, xi| 2.0 * gi * xi))),
            Op::SqrtEps(x) => pending.push((*x, g.zip_map(y, |gi, yi| gi / (2.0 * yi)))),
            Op::Huber(x, delta) => {
                let d = *delta;
                pending.push((*x, g.zip_map(val(*x), |gi, r| gi * r.clamp(-d, d))))
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = g.cols as f64;
                let mut dx = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gi), xi) in dx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                        *o = inv_std[r] * (gi - mg - xi * mgx);
                    }
                }
                pending.push((*x, dx));
            }
            Op::SoftmaxRows { x, mask } => {
                let mut dx = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..g.cols {
                        if mask.as_ref().is_none_or(|m| m[c]) {
                            dx.set(r, c, yr[c] * (gr[c] - s));
                        }
                    }
                }
                pending.push((*x, dx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data[0];
                let mut dl = Matrix::zeros(probs.rows, probs.cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = dl.row_mut(r);
                        row.copy_from_slice(probs.row(r));
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
                pending.push((*logits, dl));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols;
                    let mut dp = Matrix::zeros(g.rows, w);
                    for r in 0..g.rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    pending.push((p, dp));
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                pending.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    let dp = Matrix::from_vec(rows, cols, g.data[off * cols..(off + rows) * cols].to_vec());
                    pending.push((p, dp));
                    off += rows;
                }
            }
            Op::Gather(x, ids) => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for (t, &i) in ids.iter().enumerate() {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(t)) {
                        *o += v;
                    }
                }
                pending.push((*x, dx));
            }
            Op::ShiftDown(x) => {
                let mut dx = Matrix::zeros(g.rows, g.cols);
                for t in 1..g.rows {
                    dx.row_mut(t - 1).copy_from_slice(g.row(t));
                }
                pending.push((*x, dx));
            }
            Op::Wkv { r, k, v, w, states } => {
                let (rv, kv, vv, wv) = (val(*r), val(*k), val(*v), val(*w));
                let (n, d) = rv.shape();
                let mut dr = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                let mut dw = Matrix::zeros(n, d);
                // Adjoint of S_t, carried backward through time.
                let mut ds = vec![0.0; d * d];
                let zero = vec![0.0; d * d];
                for t in (0..n).rev() {
                    let st = &states[t * d * d..(t + 1) * d * d];
                    let sprev = if t == 0 { &zero[..] } else { &states[(t - 1) * d * d..t * d * d] };
                    let (gt, rt, kt, vt, wt) = (g.row(t), rv.row(t), kv.row(t), vv.row(t), wv.row(t));
                    for i in 0..d {
                        let srow = &st[i * d..(i + 1) * d];
                        let dsrow = &mut ds[i * d..(i + 1) * d];
                        // o_t = r_tᵀ S_t
                        dr.data[t * d + i] = srow.iter().zip(gt).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dsrow[j] += rt[i] * gt[j];
                        }
                        // S_t = w_t ⊙ S_{t-1} + k_t v_tᵀ
                        let prow = &sprev[i * d..(i + 1) * d];
                        let mut dki = 0.0;
                        let mut dwi = 0.0;
                        for j in 0..d {
                            dki += dsrow[j] * vt[j];
                            dwi += dsrow[j] * prow[j];
                            dv.data[t * d + j] += dsrow[j] * kt[i];
                        }
                        dk.data[t * d + i] = dki;
                        dw.data[t * d + i] = dwi;
                        for x in dsrow.iter_mut() {
                            *x *= wt[i];
                        }
                    }
                }
                pending.push((*r, dr));
                pending.push((*k, dk));
                pending.push((*v, dv));
                pending.push((*w, dw));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                pending.push((*x, Matrix::filled(xv.rows, xv.cols, g.data[0])));
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    dx.row_mut(r).copy_from_slice(&g.data);
                }
                pending.push((*x, dx));
            }
            Op::SumCols(x) => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    dx.row_mut(r).fill(g.data[r]);
                }
                pending.push((*x, dx));
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut dx = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * s) / norms[r];
                    }
                }
                pending.push((*x, dx));
            }
            Op::PairwiseDist(z) => {
                let zv = val(*z);
                let n = zv.rows;
                let mut dz = Matrix::zeros(zv.rows, zv.cols);
                for i in 0..n {
                    for j in 0..n {
                        let c = g.get(i, j) / y.get(i, j);
                        if c == 0.0 || i == j {
                            continue;
                        }
                        for col in 0..zv.cols {
                            let diff = zv.get(i, col) - zv.get(j, col);
                            dz.data[i * zv.cols + col] += c * diff;
                            dz.data[j * zv.cols + col] -= c * diff;
                        }
                    }
                }
                pending.push((*z, dz));
            }
        }
        for (v, d) in pending {
            self.acc(v, d);
        }
    }

    /// Gradients for every parameter in `params`, zero where unused.
    pub fn param_grads(&self, params: &ParamSet) -> Vec<Matrix> {
        let mut out = params.zeros_like();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads.get(i).and_then(Option::as_ref) {
                    out[id.0].add_assign(g);
                }
            }
        }
        out
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Analytic-vs-numeric comparison for one tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub count: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }
}

/// Central-difference check of `analytic` against `loss` for every tensor.
///
/// Relative error per tensor is `max|a - n| / max(max|a|, max|n|, floor)`
/// where `floor = 1e-8` guards tensors whose gradient is (near) zero.
pub fn grad_check(
    params: &ParamSet,
    step: f64,
    analytic: &[Matrix],
    loss: impl Fn(&ParamSet) -> f64,
) -> GradCheckReport {
    const FLOOR: f64 = 1e-8;
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (t, name) in params.names().iter().enumerate() {
        let mut max_abs_err: f64 = 0.0;
        let mut max_a: f64 = 0.0;
        let mut max_n: f64 = 0.0;
        for e in 0..params.values()[t].len() {
            let orig = work.values()[t].data[e];
            work.values_mut()[t].data[e] = orig + step;
            let up = loss(&work);
            work.values_mut()[t].data[e] = orig - step;
            let down = loss(&work);
            work.values_mut()[t].data[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t].data[e];
            max_abs_err = max_abs_err.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        let rel_err = max_abs_err / max_a.max(max_n).max(FLOOR);
        tensors.push(TensorCheck { name: name.clone(), count: params.values()[t].len(), max_abs_err, rel_err });
    }
    GradCheckReport { step, tensors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        params.add("x", Matrix::randn(3, 4, 1.0, &mut rng));
        let weights = Matrix::randn(3, 4, 1.0, &mut rng);
        let eval = |p: &ParamSet, grads: bool| {
            let mut t = Tape::new();
            let x = t.param(p, ParamId(0));
            let y = build(&mut t, x);
            let w = t.leaf(weights.clone());
            let yw = if t.value(y).shape() == (3, 4) { t.mul(y, w) } else { y };
            let l = t.sum(yw);
            let v = t.scalar(l);
            if grads {
                t.backward(l);
                (v, t.param_grads(p))
            } else {
                (v, vec![])
            }
        };
        let (_, g) = eval(&params, true);
        let report = grad_check(&params, 1e-5, &g, |p| eval(p, false).0);
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(|t, x| t.sigmoid(x));
        check_unary(|t, x| t.tanh(x));
        check_unary(|t, x| t.silu(x));
        check_unary(|t, x| t.softplus(x));
        check_unary(|t, x| t.layer_norm(x));
        check_unary(|t, x| t.softmax_rows(x, Some(vec![true, false, true, true])));
        check_unary(|t, x| t.l2_normalize_rows(x));
        check_unary(|t, x| t.shift_down(x));
        check_unary(|t, x| t.huber(x, 0.7));
        check_unary(|t, x| {
            let s = t.square(x);
            t.sqrt_eps(s)
        });
        check_unary(|t, x| t.pairwise_dist(x));
        check_unary(|t, x| t.cross_entropy_sum(x, vec![Some(1), None, Some(3)]));
        check_unary(|t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_cols(x, 0, 2);
            let c = t.concat_cols(&[a, b]);
            let d = t.gather(c, vec![2, 0, 2]);
            let e = t.concat_rows(&[d, c]);
            let f = t.sum_rows(e);
            let h = t.sum_cols(e);
            let fs = t.square(f);
            let hs = t.square(h);
            let s1 = t.sum(fs);
            let s2 = t.sum(hs);
            t.add(s1, s2)
        });
    }

    #[test]
    fn wkv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        for name in ["r", "k", "v", "w"] {
            params.add(name, Matrix::randn(4, 3, 1.0, &mut rng));
        }
        let out_w = Matrix::randn(4, 3, 1.0, &mut rng);
        let eval = |p: &ParamSet, grads: bool| {
            let mut t = Tape::new();
            let ids: Vec<Var> = (0..4).map(|i| t.param(p, ParamId(i))).collect();
            let r = t.sigmoid(ids[0]);
            let w = t.sigmoid(ids[3]);
            let o = t.wkv(r, ids[1], ids[2], w);
            let c = t.leaf(out_w.clone());
            let m = t.mul(o, c);
            let l = t.sum(m);
            let val = t.scalar(l);
            if grads {
                t.backward(l);
                (val, t.param_grads(p))
            } else {
                (val, vec![])
            }
        };
        let (_, g) = eval(&params, true);
        let report = grad_check(&params, 1e-5, &g, |p| eval(p, false).0);
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    #[test]
    fn matmul_family_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params.add("a", Matrix::randn(3, 4, 1.0, &mut rng));
        params.add("b", Matrix::randn(4, 2, 1.0, &mut rng));
        params.add("c", Matrix::randn(5, 2, 1.0, &mut rng));
        params.add("row", Matrix::randn(1, 2, 1.0, &mut rng));
        let eval = |p: &ParamSet, grads: bool| {
            let mut t = Tape::new();
            let (a, b, c, row) = (t.param(p, ParamId(0)), t.param(p, ParamId(1)), t.param(p, ParamId(2)), t.param(p, ParamId(3)));
            let ab = t.matmul(a, b);
            let abr = t.add_row(ab, row);
            let abm = t.mul_row(abr, row);
            let x = t.matmul_bt(abm, c);
            let xt = t.transpose(x);
            let y = t.tanh(xt);
            let z = t.affine(y, 2.0, 0.5);
            let l = t.mean(z);
            let val = t.scalar(l);
            if grads {
                t.backward(l);
                (val, t.param_grads(p))
            } else {
                (val, vec![])
            }
        };
        let (_, g) = eval(&params, true);
        let report = grad_check(&params, 1e-5, &g, |p| eval(p, false).0);
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    #[test]
    fn huber_values_and_continuity() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(1.0, 1.0), 0.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
    }
}
