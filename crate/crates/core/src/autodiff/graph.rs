use std::sync::Arc;

use rand::Rng;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// input id is smaller than the id of the node that consumes it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that shares storage with the caller, e.g. model parameters.
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`] call. Nodes that
    /// do not require gradients, or that the output does not depend on,
    /// report `None`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by transpose of {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Adds the vector `b[n]` to every row of `x[..×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).len() != cols {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x, b]);
        Ok(self.push(value, rg, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Gelu(x))
    }

    /// Gathers rows of `table[V×d]` into an `ids.len()×d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.rc(table);
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding lookup of no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary(format!("id {id} is outside a table of {vocab} rows")));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            value,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat of no tensors".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::Dimension(format!(
                    "row concat of {:?} with {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat of no tensors".into()));
        };
        let rows = self.value(first).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::Dimension(format!(
                "column concat of {:?} with {:?}",
                self.shape(first),
                self.shape(bad)
            )));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if len == 0 || start + len > cols {
            return Err(Error::Bound(format!(
                "columns {start}..{} of a {cols}-column tensor",
                start + len
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if len == 0 || start + len > rows {
            return Err(Error::Bound(format!(
                "rows {start}..{} of a {rows}-row tensor",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::matrix(len, cols, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::SliceRows { x, start }))
    }

    /// Column means, producing a `1×d` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.rc(x);
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in data.iter_mut().zip(self.value(x).row(r)) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= rows as f64);
        let value = Tensor::matrix(1, cols, data).expect("positive cols");
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Inverted dropout. Callers only insert it while training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias` with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.rc(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Dimension(format!(
                "layer norm over {d} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Argument(format!("layer norm eps {eps} must be positive")));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let n = (row[j] - mean) * is;
                normalized.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax. Entries whose mask is `false` get probability zero
    /// (equivalent to filling their logits with negative infinity).
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::Dimension(format!(
                    "mask of {} entries for a {rows}×{cols} score matrix",
                    m.len()
                )));
            }
        }
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = src.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Masking { row: r });
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for j in 0..cols {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√d + mask) · v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        let d = self.value(q).cols();
        if self.value(k).rows() != self.value(v).rows() {
            return Err(Error::Dimension(format!(
                "attention keys {:?} and values {:?} disagree on length",
                self.shape(k),
                self.shape(v)
            )));
        }
        let scores = self.matmul_nt(q, k)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax(scores, mask)?;
        self.matmul(weights, v)
    }

    /// Mean label-smoothed cross entropy over the rows whose target differs
    /// from `ignore_index`. The smoothed target puts `1 - smoothing` on the
    /// true class and `smoothing / (V - 1)` on every other class.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        ignore_index: usize,
    ) -> Result<Var> {
        let (rows, vocab) = self.rc(logits);
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Argument(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if vocab < 2 && smoothing > 0.0 {
            return Err(Error::Argument("label smoothing needs at least two classes".into()));
        }
        let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
        let src = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= vocab {
                return Err(Error::Vocabulary(format!("target {t} outside {vocab} classes")));
            }
            let row = src.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut loss = 0.0;
            for j in 0..vocab {
                let logp = row[j] - lse;
                p[j] = logp.exp();
                let q = if j == t { 1.0 - smoothing } else { off };
                if q > 0.0 {
                    loss -= q * logp;
                }
            }
            total += loss;
            count += 1;
        }
        if count == 0 {
            return Err(Error::UndefinedMean);
        }
        let value = Tensor::scalar(total / count as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                smoothing,
                probs,
                count,
            },
        ))
    }

    /// Backpropagates from the scalar `output`, replacing any gradients left
    /// by an earlier call.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar output of shape {:?}",
                self.shape(output)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[output.0].grad = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let n = val(*b).cols();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g, val(*b).data(), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(val(*a).data(), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.rc(*a);
                let n = val(*b).rows();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(g, val(*b).data(), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(g, val(*a).data(), &mut db, m, n, k);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if wants(*b) {
                    let cols = val(*b).len();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    out.push((*x, g.iter().map(|v| v * s).collect()));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, &v)| {
                            let u = GELU_C * (v + 0.044715 * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = val(*table).cols();
                    let mut dt = vec![0.0; val(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        dt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                    out.push((*table, dt));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.rc(p);
                    if wants(p) {
                        let mut dp = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + start..r * total + start + cols]);
                        }
                        out.push((p, dp));
                    }
                    start += cols;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (rows, cols) = self.rc(*x);
                    let len = node.value.cols();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    out.push((*x, dx));
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let cols = node.value.cols();
                    let mut dx = vec![0.0; val(*x).len()];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let (rows, _) = self.rc(*x);
                    let scaled: Vec<f64> = g.iter().map(|v| v / rows as f64).collect();
                    out.push((*x, scaled.repeat(rows)));
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    out.push((*x, vec![g[0]; val(*x).len()]));
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    out.push((*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, d) = self.rc(*x);
                let gv = val(*gain).data();
                if wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (i, (gr, nr)) in g.iter().zip(normalized).enumerate() {
                        dg[i % d] += gr * nr;
                    }
                    out.push((*gain, dg));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let nr = &normalized[r * d..(r + 1) * d];
                        let dy: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dy = dy.iter().sum::<f64>() / d as f64;
                        let mean_dyn = dot(&dy, nr) / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dy[j] - mean_dy - nr[j] * mean_dyn);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let cols = node.value.cols();
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                smoothing,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let vocab = val(*logits).cols();
                    let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
                    let scale = g[0] / *count as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..vocab {
                            let q = if j == t { 1.0 - smoothing } else { off };
                            dl[r * vocab + j] = (probs[r * vocab + j] - q) * scale;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
        }
        out
    }
}
