use std::ops::Range;

use super::tensor::{matmul_into, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    Square(Var),
    LogClamp(Var, f64),
    SoftmaxRows { x: Var, cols: usize },
    MaskedSoftmax { x: Var, segments: Vec<Range<usize>>, mask: Vec<bool> },
    Transpose { x: Var, rows: usize, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    WeightedSum(Var, Vec<f64>),
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Inputs always precede the nodes that consume them, so a single reverse sweep
/// over node ids is a valid topological order for `backward`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by the [`Var`] they belong to.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; self.numels[v.0]], <[f64]>::to_vec)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape { op, detail: format!("lhs {a:?} vs rhs {b:?}") }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2("matmul"), tb.dims2("matmul")) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(shape_err("matmul", ta.shape(), tb.shape())),
        };
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_into(ta.data(), tb.data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Adds a row-vector bias `[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2("add_bias")?;
        if tb.numel() != n || tb.rank() != 1 {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::raw(shape, out), Op::AddBias { x, bias, cols: n }, ng))
    }

    /// `x·W + b` with `W[in×out]` and `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::raw(ta.shape().to_vec(), data), self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::raw(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect());
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// Elementwise product with a constant (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if c.len() != tx.numel() {
            return Err(shape_err("mul_const", tx.shape(), &[c.len()]));
        }
        let data = tx.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::raw(tx.shape().to_vec(), data);
        let ng = self.ng(x);
        Ok(self.push(t, Op::MulConst(x, c), ng))
    }

    /// Exact erf form, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, eps: f64) -> Var {
        self.map(x, Op::LogClamp(x, eps), |v| v.max(eps).ln())
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.dims2("softmax_rows")?;
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::raw(tx.shape().to_vec(), out);
        let ng = self.ng(x);
        Ok(self.push(t, Op::SoftmaxRows { x, cols }, ng))
    }

    /// Softmax over the unmasked entries of a score vector; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(scores).numel();
        self.segment_masked_softmax(scores, &[0..n], mask)
    }

    /// Independent masked softmax over each contiguous `segment` of a flat score vector.
    /// Entries outside every segment are 0 and receive no gradient.
    pub fn segment_masked_softmax(&mut self, scores: Var, segments: &[Range<usize>], mask: &[bool]) -> Result<Var> {
        let tx = self.value(scores);
        let n = tx.numel();
        if mask.len() != n {
            return Err(shape_err("masked_softmax", tx.shape(), &[mask.len()]));
        }
        let x = tx.data();
        let mut out = vec![0.0; n];
        for seg in segments {
            if seg.end > n || seg.start >= seg.end {
                return Err(Error::Shape { op: "masked_softmax", detail: format!("segment {seg:?} outside 0..{n}") });
            }
            let max = seg
                .clone()
                .filter(|&j| mask[j])
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::NoValidCandidate);
            }
            let mut total = 0.0;
            for j in seg.clone().filter(|&j| mask[j]) {
                out[j] = (x[j] - max).exp();
                total += out[j];
            }
            for j in seg.clone().filter(|&j| mask[j]) {
                out[j] /= total;
            }
        }
        let t = Tensor::raw(tx.shape().to_vec(), out);
        let ng = self.ng(scores);
        let op = Op::MaskedSoftmax { x: scores, segments: segments.to_vec(), mask: mask.to_vec() };
        Ok(self.push(t, op, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2("transpose")?;
        let d = tx.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = d[i * cols + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::raw(vec![cols, rows], out), Op::Transpose { x, rows, cols }, ng))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push((p, c));
        }
        let rows = rows.ok_or_else(|| Error::Shape { op: "concat_cols", detail: "no inputs".into() })?;
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::raw(vec![rows, total], out), Op::ConcatCols { parts: widths, rows }, ng))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_rows")?;
            if *cols.get_or_insert(c) != c {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let cols = cols.ok_or_else(|| Error::Shape { op: "concat_rows", detail: "no inputs".into() })?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::raw(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Selects (and possibly repeats) rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Shape { op: "gather_rows", detail: "empty index list".into() });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Shape { op: "gather_rows", detail: format!("row {i} out of {rows}") });
            }
            out.extend_from_slice(tx.row(i));
        }
        let ng = self.ng(x);
        let op = Op::GatherRows { x, idx: idx.to_vec(), cols };
        Ok(self.push(Tensor::raw(vec![idx.len(), cols], out), op, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(shape_err("reshape", tx.shape(), &shape));
        }
        let t = Tensor::raw(shape, tx.data().to_vec());
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Scalar `Σ wᵢ·xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if w.len() != tx.numel() {
            return Err(shape_err("weighted_sum", tx.shape(), &[w.len()]));
        }
        let s = tx.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Single-head scaled dot-product attention:
    /// row i of the result is `softmax(qᵢ·Kᵀ/√d_k)·V`.
    pub fn attend(&mut self, query_rows: Var, keys: Var, values: Var) -> Result<Var> {
        let (_, dk) = self.value(query_rows).dims2("attend")?;
        let (kb, kdk) = self.value(keys).dims2("attend")?;
        let (vb, _) = self.value(values).dims2("attend")?;
        if kb == 0 || vb == 0 {
            return Err(Error::EmptyReferenceSet);
        }
        if kb != vb {
            return Err(shape_err("attend", self.value(keys).shape(), self.value(values).shape()));
        }
        if kdk != dk {
            return Err(shape_err("attend", self.value(query_rows).shape(), self.value(keys).shape()));
        }
        let kt = self.transpose(keys)?;
        let logits = self.matmul(query_rows, kt)?;
        let logits = self.scale(logits, 1.0 / (dk as f64).sqrt());
        let weights = self.softmax_rows(logits)?;
        self.matmul(weights, values)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite(format!("backward root value {}", rv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        let numels = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients { grads, numels })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.ng(a) {
                    let gb = matmul_nt(g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, gb);
                }
                if self.ng(b) {
                    let ga = matmul_tn(self.value(a).data(), g, m, k, n);
                    self.accumulate(grads, b, ga);
                }
            }
            &Op::AddBias { x, bias, cols } => {
                self.accumulate(grads, x, g.to_vec());
                if self.ng(bias) {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, bias, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, g.iter().zip(db).map(|(x, y)| x * y).collect());
                self.accumulate(grads, b, g.iter().zip(da).map(|(x, y)| x * y).collect());
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, g.iter().map(|v| v * c).collect()),
            Op::MulConst(x, c) => self.accumulate(grads, *x, g.iter().zip(c).map(|(a, b)| a * b).collect()),
            &Op::Gelu(x) => {
                let dx = self.value(x).data();
                self.accumulate(grads, x, g.iter().zip(dx).map(|(gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            &Op::Sigmoid(x) => {
                self.accumulate(grads, x, g.iter().zip(out).map(|(gv, &s)| gv * s * (1.0 - s)).collect());
            }
            &Op::Square(x) => {
                let dx = self.value(x).data();
                self.accumulate(grads, x, g.iter().zip(dx).map(|(gv, &xv)| 2.0 * gv * xv).collect());
            }
            &Op::LogClamp(x, eps) => {
                let dx = self.value(x).data();
                let d = g.iter().zip(dx).map(|(gv, &xv)| if xv > eps { gv / xv } else { 0.0 }).collect();
                self.accumulate(grads, x, d);
            }
            &Op::SoftmaxRows { x, cols } => {
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::MaskedSoftmax { x, segments, mask } => {
                let mut d = vec![0.0; g.len()];
                for seg in segments {
                    let dot: f64 = seg.clone().filter(|&j| mask[j]).map(|j| g[j] * out[j]).sum();
                    for j in seg.clone().filter(|&j| mask[j]) {
                        d[j] = out[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            &Op::Transpose { x, rows, cols } => {
                // g is [cols×rows]
                let mut d = vec![0.0; g.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        d[i * cols + j] = g[j * rows + i];
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..*rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { x, idx, cols } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (dv, gv) in d[src * cols..(src + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::WeightedSum(x, w) => self.accumulate(grads, *x, w.iter().map(|wv| wv * g[0]).collect()),
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
        }
    }
}
