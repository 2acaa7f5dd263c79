//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every operation as it is
//! evaluated, and replays the tape backwards to produce one gradient per
//! parameter. Node values are immutable once recorded; reductions run in a
//! fixed left-to-right order so repeated evaluations are bit-identical.

use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, sigmoid, softplus, Tensor};
use crate::error::NumericError;

type Res<T> = Result<T, NumericError>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        tables: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    RowDot(Var, Var),
    LayerNormRows(Var, Vec<f64>),
    LogSumExpRows(Var, Option<Vec<bool>>),
    PickRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    AttnScores {
        q: Var,
        k: Var,
        heads: usize,
        seq: usize,
        scale: f64,
    },
    AttnApply {
        p: Var,
        v: Var,
        heads: usize,
        seq: usize,
    },
    /// Negative-control fixture: ReLU whose adjoint is deliberately off by 1.5x.
    TamperedRelu(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::RowDot(..) => "row_dot",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
            Op::PickRows(..) => "pick_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::AttnScores { .. } => "attn_scores",
            Op::AttnApply { .. } => "attn_apply",
            Op::TamperedRelu(_) => "tampered_relu",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn label(&self, v: Var) -> String {
        match &self.nodes[v.0].op {
            Op::Param(name) => format!("param `{name}`"),
            op => format!("#{} ({})", v.0, op.name()),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericError {
        NumericError::ShapeMismatch {
            op,
            lhs_name: self.label(a),
            lhs: self.shape(a).to_vec(),
            rhs_name: self.label(b),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Res<Var> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: op.name() });
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::AttnScores { q, k, .. } => vec![*q, *k],
            Op::AttnApply { p, v, .. } => vec![*p, *v],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::TamperedRelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2NormalizeRows(a, _)
            | Op::LayerNormRows(a, _)
            | Op::LogSumExpRows(a, _)
            | Op::PickRows(a, _)
            | Op::SoftmaxRows(a) => vec![*a],
            Op::Gather { tables, .. } => tables.clone(),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Res<Var> {
        self.push(t, Op::Constant)
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Res<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .value(name)
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()))?;
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Res<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(NumericError::Invalid(format!(
                "{op}: {} must be a matrix, has shape {s:?}",
                self.label(v)
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Res<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Res<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op.name(), a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Res<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Res<Var> {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Res<Var> {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    #[doc(hidden)]
    pub fn tampered_relu(&mut self, a: Var) -> Res<Var> {
        self.map(a, Op::TamperedRelu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Res<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Res<Var> {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Res<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Res<Var> {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Res<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(b).len() != n {
            return Err(self.mismatch("add_row", a, b));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &x) in data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += x;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddRow(a, b))
    }

    /// `a[m,n] * b[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Res<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(b).len() != n {
            return Err(self.mismatch("mul_row", a, b));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &x) in data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o *= x;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::MulRow(a, b))
    }

    /// Scales row `i` of `a` by `w[i]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Res<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(w).len() != m {
            return Err(self.mismatch("mul_col", a, w));
        }
        let wv = self.value(w).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for o in &mut data[i * n..(i + 1) * n] {
                *o *= wv[i];
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::MulCol(a, w))
    }

    pub fn sum(&mut self, a: Var) -> Res<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Res<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row gather across one or more tables: output row `r` is row
    /// `index[r].1` of `tables[index[r].0]`. The adjoint scatter-adds.
    pub fn gather(&mut self, tables: &[Var], index: &[(usize, usize)]) -> Res<Var> {
        if tables.is_empty() || index.is_empty() {
            return Err(NumericError::Invalid("gather: empty tables or index".into()));
        }
        let (_, d) = self.dims2(tables[0], "gather")?;
        for &t in &tables[1..] {
            if self.dims2(t, "gather")?.1 != d {
                return Err(self.mismatch("gather", tables[0], t));
            }
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &(t, r) in index {
            let table = tables.get(t).ok_or(NumericError::IndexOutOfRange {
                op: "gather",
                index: t,
                bound: tables.len(),
            })?;
            let value = self.value(*table);
            let rows = value.shape()[0];
            if r >= rows {
                return Err(NumericError::IndexOutOfRange {
                    op: "gather",
                    index: r,
                    bound: rows,
                });
            }
            out.extend_from_slice(value.row(r));
        }
        self.push(
            Tensor::from_parts(vec![index.len(), d], out),
            Op::Gather {
                tables: tables.to_vec(),
                index: index.to_vec(),
            },
        )
    }

    /// Each row divided by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Res<Var> {
        let (m, n) = self.dims2(a, "l2_normalize_rows")?;
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt().max(NORM_EPS);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::L2NormalizeRows(a, norms),
        )
    }

    /// Per-row inner product of two equally shaped matrices, shape `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Res<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("row_dot", a, b));
        }
        let (m, n) = self.value(a).dims2();
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| dot(&x[i * n..(i + 1) * n], &y[i * n..(i + 1) * n]))
            .collect();
        self.push(Tensor::from_parts(vec![m], out), Op::RowDot(a, b))
    }

    /// Cosine similarity of paired rows; inputs need not be normalized.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Res<Var> {
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        self.row_dot(na, nb)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Res<Var> {
        let (m, n) = self.dims2(a, "layer_norm_rows")?;
        let x = self.value(a).data();
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|v| (v - mu) * r));
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNormRows(a, rstd),
        )
    }

    /// Stable row-wise log-sum-exp, shape `[m]`. Entries with `mask == false`
    /// are excluded; every row must keep at least one entry.
    pub fn log_sum_exp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Res<Var> {
        let (m, n) = self.dims2(a, "log_sum_exp_rows")?;
        if let Some(mask) = &mask {
            if mask.len() != m * n {
                return Err(NumericError::Invalid(format!(
                    "log_sum_exp_rows: mask has {} entries for a {m}x{n} input",
                    mask.len()
                )));
            }
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
            let row = &x[i * n..(i + 1) * n];
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(NumericError::Invalid(format!(
                    "log_sum_exp_rows: row {i} has no unmasked entries"
                )));
            }
            let s: f64 = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        self.push(Tensor::from_parts(vec![m], out), Op::LogSumExpRows(a, mask))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_rows(&mut self, a: Var, idx: &[usize]) -> Res<Var> {
        let (m, n) = self.dims2(a, "pick_rows")?;
        if idx.len() != m {
            return Err(NumericError::Invalid(format!(
                "pick_rows: {} indices for {m} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(NumericError::IndexOutOfRange {
                op: "pick_rows",
                index: bad,
                bound: n,
            });
        }
        let x = self.value(a).data();
        let out = idx.iter().enumerate().map(|(i, &j)| x[i * n + j]).collect();
        self.push(
            Tensor::from_parts(vec![m], out),
            Op::PickRows(a, idx.to_vec()),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Res<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - mx).exp()));
            let s: f64 = out[start..].iter().sum();
            for v in &mut out[start..] {
                *v /= s;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a))
    }

    /// Scaled dot-product scores for multi-head self-attention over groups of
    /// `seq` consecutive rows. `q`, `k`: `[groups*seq, d]`; output
    /// `[groups*heads*seq, seq]` with row `(g, h, i)` holding head `h`'s
    /// scores of query `i` against every key in group `g`.
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, seq: usize) -> Res<Var> {
        if self.shape(q) != self.shape(k) {
            return Err(self.mismatch("attn_scores", q, k));
        }
        let (rows, d) = self.dims2(q, "attn_scores")?;
        if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(NumericError::Invalid(format!(
                "attn_scores: {rows}x{d} input cannot split into {heads} heads over sequences of {seq}"
            )));
        }
        let dh = d / heads;
        let groups = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; groups * heads * seq * seq];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..seq {
                    let qrow = &qd[(g * seq + i) * d + h * dh..][..dh];
                    let orow = ((g * heads + h) * seq + i) * seq;
                    for j in 0..seq {
                        let krow = &kd[(g * seq + j) * d + h * dh..][..dh];
                        out[orow + j] = scale * dot(qrow, krow);
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![groups * heads * seq, seq], out),
            Op::AttnScores {
                q,
                k,
                heads,
                seq,
                scale,
            },
        )
    }

    /// Applies attention weights from [`Graph::attn_scores`] (after a row
    /// softmax) to values `v: [groups*seq, d]`.
    pub fn attn_apply(&mut self, p: Var, v: Var, heads: usize, seq: usize) -> Res<Var> {
        let (rows, d) = self.dims2(v, "attn_apply")?;
        let (prow, pcol) = self.dims2(p, "attn_apply")?;
        if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(self.mismatch("attn_apply", p, v));
        }
        let groups = rows / seq;
        if prow != groups * heads * seq || pcol != seq {
            return Err(self.mismatch("attn_apply", p, v));
        }
        let dh = d / heads;
        let (pd, vd) = (self.value(p).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..seq {
                    let prow = &pd[((g * heads + h) * seq + i) * seq..][..seq];
                    let orow = (g * seq + i) * d + h * dh;
                    for (j, &w) in prow.iter().enumerate() {
                        let vrow = &vd[(g * seq + j) * d + h * dh..][..dh];
                        for (o, &x) in out[orow..orow + dh].iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::AttnApply { p, v, heads, seq },
        )
    }

    /// Gradients of scalar `loss` with respect to every parameter in the
    /// store (zeros for parameters the tape never touched).
    pub fn backward(&self, loss: Var) -> Res<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumericError::Invalid(format!(
                "backward: loss must be scalar, has shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, p) in self.params.iter() {
            let grad = match self.param_vars.get(name) {
                Some(v) => match grads[v.0].take() {
                    Some(g) => Tensor::from_parts(p.shape().to_vec(), g),
                    None => Tensor::zeros(p.shape()),
                },
                None => Tensor::zeros(p.shape()),
            };
            out.insert(name.clone(), grad);
        }
        if out.values().any(|g| !g.is_finite()) {
            return Err(NumericError::NonFinite { op: "backward" });
        }
        Ok(Gradients::from_map(out))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| gemm_nt(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(av, g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| gemm_nn(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(g, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, d), x) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * x;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += c * d)
            }),
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let n = self.value(*b).len();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for (grow, orow) in g.chunks(n).zip(ga.chunks_mut(n)) {
                        for j in 0..n {
                            orow[j] += grow[j] * bv[j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for j in 0..n {
                            gb[j] += grow[j] * arow[j];
                        }
                    }
                });
            }
            Op::MulCol(a, w) => {
                let (m, n) = self.value(*a).dims2();
                let (av, wv) = (self.value(*a).data(), self.value(*w).data());
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * wv[i];
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for i in 0..m {
                        gw[i] += dot(&g[i * n..(i + 1) * n], &av[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::TamperedRelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += 1.5 * g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sigmoid(x[i]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Gather { tables, index } => {
                let d = node.value.dims2().1;
                for (t, &table) in tables.iter().enumerate() {
                    acc(table, &mut |gt| {
                        for (r, &(ti, row)) in index.iter().enumerate() {
                            if ti == t {
                                add_into(&mut gt[row * d..(row + 1) * d], &g[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let (m, n) = node.value.dims2();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let proj = dot(yr, gr);
                        for j in 0..n {
                            ga[i * n + j] += (gr[j] - yr[j] * proj) / norms[i];
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (m, n) = self.value(*a).dims2();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i] * bv[i * n + j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[i * n + j] += g[i] * av[i * n + j];
                        }
                    }
                });
            }
            Op::LayerNormRows(a, rstd) => {
                let (m, n) = node.value.dims2();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = dot(gr, yr) / n as f64;
                        for j in 0..n {
                            ga[i * n + j] += rstd[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            Op::LogSumExpRows(a, mask) => {
                let (m, n) = self.value(*a).dims2();
                let x = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            if mask.as_ref().is_none_or(|mk| mk[i * n + j]) {
                                ga[i * n + j] += g[i] * (x[i * n + j] - y[i]).exp();
                            }
                        }
                    }
                });
            }
            Op::PickRows(a, idx) => {
                let n = self.value(*a).dims2().1;
                acc(*a, &mut |ga| {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * n + j] += g[i];
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            ga[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::AttnScores {
                q,
                k,
                heads,
                seq,
                scale,
            } => {
                let (rows, d) = self.value(*q).dims2();
                let (heads, seq, scale) = (*heads, *seq, *scale);
                let dh = d / heads;
                let groups = rows / seq;
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                acc(*q, &mut |gq| {
                    for gi in 0..groups {
                        for h in 0..heads {
                            for i in 0..seq {
                                let grow = &g[((gi * heads + h) * seq + i) * seq..][..seq];
                                let out = (gi * seq + i) * d + h * dh;
                                for (j, &w) in grow.iter().enumerate() {
                                    let krow = &kd[(gi * seq + j) * d + h * dh..][..dh];
                                    for c in 0..dh {
                                        gq[out + c] += scale * w * krow[c];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for gi in 0..groups {
                        for h in 0..heads {
                            for i in 0..seq {
                                let grow = &g[((gi * heads + h) * seq + i) * seq..][..seq];
                                let qrow = &qd[(gi * seq + i) * d + h * dh..][..dh];
                                for (j, &w) in grow.iter().enumerate() {
                                    let out = (gi * seq + j) * d + h * dh;
                                    for c in 0..dh {
                                        gk[out + c] += scale * w * qrow[c];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AttnApply { p, v, heads, seq } => {
                let (rows, d) = self.value(*v).dims2();
                let (heads, seq) = (*heads, *seq);
                let dh = d / heads;
                let groups = rows / seq;
                let (pd, vd) = (self.value(*p).data(), self.value(*v).data());
                acc(*p, &mut |gp| {
                    for gi in 0..groups {
                        for h in 0..heads {
                            for i in 0..seq {
                                let grow = &g[(gi * seq + i) * d + h * dh..][..dh];
                                let prow = ((gi * heads + h) * seq + i) * seq;
                                for j in 0..seq {
                                    let vrow = &vd[(gi * seq + j) * d + h * dh..][..dh];
                                    gp[prow + j] += dot(grow, vrow);
                                }
                            }
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for gi in 0..groups {
                        for h in 0..heads {
                            for i in 0..seq {
                                let grow = &g[(gi * seq + i) * d + h * dh..][..dh];
                                let prow = &pd[((gi * heads + h) * seq + i) * seq..][..seq];
                                for (j, &w) in prow.iter().enumerate() {
                                    let out = (gi * seq + j) * d + h * dh;
                                    for c in 0..dh {
                                        gv[out + c] += w * grow[c];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

/// Records `build` on a fresh tape and returns the scalar loss together with
/// one gradient per parameter in `params`.
pub fn forward_backward<F>(params: &ParamStore, build: F) -> Result<(f64, Gradients), NumericError>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var, NumericError>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Forward pass only.
pub fn forward_value<F>(params: &ParamStore, build: F) -> Result<f64, NumericError>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var, NumericError>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    if g.value(loss).len() != 1 {
        return Err(NumericError::Invalid("loss must be scalar".into()));
    }
    Ok(g.value(loss).item())
}
