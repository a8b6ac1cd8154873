//! Reverse-mode differentiation over batched matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Values are
//! batch×feature matrices (row vectors for per-feature parameters, 1×1 for
//! scalars). [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar output with respect to every leaf registered with a
//! [`ParamKey`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifies a trainable leaf across forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKey {
    /// Entry of the network's parameter store.
    Net(usize),
    /// Architecture variable of node `node` in cell kind `kind`.
    Arch { kind: usize, node: usize },
}

pub type Gradients = BTreeMap<ParamKey, Matrix>;

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamKey>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    ScaleConst(Var, f64),
    ScaleByEntry(Var, Var, usize),
    Tanh(Var),
    AvgPool3(Var),
    MaxPool3(Var, Vec<usize>),
    BatchNorm(Var, Vec<f64>),
    ColAffine(Var, Var, Var),
    SoftmaxXent(Var, Vec<usize>, Matrix),
    SegmentSoftmax(Var, usize),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-column statistics from a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// A leaf; gradients are reported under `key` only when `trainable`.
    pub fn param(&mut self, key: ParamKey, value: Matrix, trainable: bool) -> Var {
        let op = Op::Leaf(trainable.then_some(key));
        self.push(value, op, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// `x + 1·row` with `row` broadcast over the batch.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xr = self.value(x);
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), xr.cols());
        let mut v = xr.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(v, Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(v, Op::ScaleConst(x, s), rg)
    }

    /// `x · s[0, k]` for a row vector `s`.
    pub fn scale_by_entry(&mut self, x: Var, s: Var, k: usize) -> Var {
        let c = self.value(s).as_slice()[k];
        let v = self.value(x).scale(c);
        let rg = self.rg(&[x, s]);
        self.push(v, Op::ScaleByEntry(x, s, k), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    /// Mean over a circular width-3 feature window.
    pub fn avg_pool3(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut v = Matrix::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let out = v.row_mut(i);
            for j in 0..c {
                let w = window(j, c);
                out[j] = w.iter().map(|&k| row[k]).sum::<f64>() / w.len() as f64;
            }
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::AvgPool3(x), rg)
    }

    /// Max over a circular width-3 feature window; ties go to the lowest
    /// feature index.
    pub fn max_pool3(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut v = Matrix::zeros(r, c);
        let mut arg = vec![0usize; r * c];
        for i in 0..r {
            let row = xv.row(i);
            for j in 0..c {
                let w = window(j, c);
                let mut best = w[0];
                for &k in &w[1..] {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                v[(i, j)] = row[best];
                arg[i * c + j] = best;
            }
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::MaxPool3(x, arg), rg)
    }

    /// Column-wise standardization with batch statistics (biased variance).
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let n = r as f64;
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for i in 0..r {
            for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / n).collect();
        let unbiased: Vec<f64> = if r > 1 {
            var.iter().map(|s| s / (n - 1.0)).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let src = xv.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let rg = self.rg(&[x]);
        let var_out = self.push(out, Op::BatchNorm(x, inv_std), rg);
        (
            var_out,
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    /// `x ∘ γ + β` with row vectors `γ`, `β` broadcast over the batch.
    pub fn col_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut v = xv.clone();
        for i in 0..v.rows() {
            for ((o, gj), bj) in v.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(v, Op::ColAffine(x, gamma, beta), rg)
    }

    /// Mean softmax cross-entropy of `logits` against integer `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != lv.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                lv.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: lv.cols(),
            });
        }
        let probs = softmax_rows(lv);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| probs[(i, l)].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / lv.rows() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::SoftmaxXent(logits, labels.to_vec(), probs),
            rg,
        ))
    }

    /// Softmax over consecutive segments of length `segment` of a row vector.
    pub fn segment_softmax(&mut self, x: Var, segment: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1);
        assert_eq!(xv.cols() % segment, 0);
        let mut out = vec![0.0; xv.cols()];
        for (src, dst) in xv
            .as_slice()
            .chunks(segment)
            .zip(out.chunks_mut(segment))
        {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let rg = self.rg(&[x]);
        self.push(Matrix::row_vector(&out), Op::SegmentSoftmax(x, segment), rg)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut v = self.value(terms[0]).clone();
        for t in &terms[1..] {
            v.add_assign(self.value(*t));
        }
        let rg = self.rg(terms);
        self.push(v, Op::Sum(terms.to_vec()), rg)
    }

    /// Gradients of the scalar `output` with respect to every trainable leaf.
    /// Leaves registered under the same key accumulate.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Dimension("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf(Some(key)) => match out.get_mut(key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(*key, g);
                    }
                },
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.pass(&mut grads, *a, &g);
                    self.pass(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.pass(&mut grads, *a, &g);
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                }
                Op::AddRow(x, row) => {
                    self.pass(&mut grads, *x, &g);
                    if self.requires_grad(*row) {
                        accumulate(&mut grads, *row, column_sums(&g));
                    }
                }
                Op::ScaleConst(x, s) => {
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g.scale(*s));
                    }
                }
                Op::ScaleByEntry(x, s, k) => {
                    let sv = self.value(*s);
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g.scale(sv.as_slice()[*k]));
                    }
                    if self.requires_grad(*s) {
                        let mut gs = Matrix::zeros(1, sv.cols());
                        gs.as_mut_slice()[*k] = g
                            .as_slice()
                            .iter()
                            .zip(self.value(*x).as_slice())
                            .map(|(a, b)| a * b)
                            .sum();
                        accumulate(&mut grads, *s, gs);
                    }
                }
                Op::Tanh(x) => {
                    if self.requires_grad(*x) {
                        let mut gx = g;
                        for (gv, y) in gx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                            *gv *= 1.0 - y * y;
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::AvgPool3(x) => {
                    if self.requires_grad(*x) {
                        let (r, c) = g.shape();
                        let mut gx = Matrix::zeros(r, c);
                        for i in 0..r {
                            let gr = g.row(i);
                            let dst = gx.row_mut(i);
                            for j in 0..c {
                                let w = window(j, c);
                                let share = gr[j] / w.len() as f64;
                                for &k in &w {
                                    dst[k] += share;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::MaxPool3(x, arg) => {
                    if self.requires_grad(*x) {
                        let (r, c) = g.shape();
                        let mut gx = Matrix::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                gx[(i, arg[i * c + j])] += g[(i, j)];
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::BatchNorm(x, inv_std) => {
                    if self.requires_grad(*x) {
                        let xhat = &node.value;
                        let (r, c) = g.shape();
                        let n = r as f64;
                        let mut sum_g = vec![0.0; c];
                        let mut sum_gx = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                sum_g[j] += g[(i, j)];
                                sum_gx[j] += g[(i, j)] * xhat[(i, j)];
                            }
                        }
                        let mut gx = Matrix::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                gx[(i, j)] = inv_std[j] / n
                                    * (n * g[(i, j)] - sum_g[j] - xhat[(i, j)] * sum_gx[j]);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::ColAffine(x, gamma, beta) => {
                    let gv = self.value(*gamma).as_slice();
                    if self.requires_grad(*x) {
                        let mut gx = g.clone();
                        for i in 0..gx.rows() {
                            for (d, gj) in gx.row_mut(i).iter_mut().zip(gv) {
                                *d *= gj;
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.requires_grad(*gamma) {
                        let xv = self.value(*x);
                        let mut gg = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (j, d) in gg.as_mut_slice().iter_mut().enumerate() {
                                *d += g[(i, j)] * xv[(i, j)];
                            }
                        }
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.requires_grad(*beta) {
                        accumulate(&mut grads, *beta, column_sums(&g));
                    }
                }
                Op::SoftmaxXent(logits, labels, probs) => {
                    if self.requires_grad(*logits) {
                        let scale = g.as_slice()[0] / probs.rows() as f64;
                        let mut gl = probs.clone();
                        for (i, &l) in labels.iter().enumerate() {
                            gl[(i, l)] -= 1.0;
                        }
                        accumulate(&mut grads, *logits, gl.scale(scale));
                    }
                }
                Op::SegmentSoftmax(x, segment) => {
                    if self.requires_grad(*x) {
                        let s = node.value.as_slice();
                        let mut gx = vec![0.0; s.len()];
                        for ((sc, gc), dst) in s
                            .chunks(*segment)
                            .zip(g.as_slice().chunks(*segment))
                            .zip(gx.chunks_mut(*segment))
                        {
                            let inner: f64 = sc.iter().zip(gc).map(|(a, b)| a * b).sum();
                            for ((d, si), gi) in dst.iter_mut().zip(sc).zip(gc) {
                                *d = si * (gi - inner);
                            }
                        }
                        accumulate(&mut grads, *x, Matrix::row_vector(&gx));
                    }
                }
                Op::Sum(terms) => {
                    for t in terms {
                        self.pass(&mut grads, *t, &g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn pass(&self, grads: &mut [Option<Matrix>], to: Var, g: &Matrix) {
        if self.requires_grad(to) {
            accumulate(grads, to, g.clone());
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

#[inline]
/// Distinct ascending feature indices of the circular window centred at `j`.
fn window(j: usize, len: usize) -> Vec<usize> {
    let mut w = vec![(j + len - 1) % len, j, (j + 1) % len];
    w.sort_unstable();
    w.dedup();
    w
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    p
}
