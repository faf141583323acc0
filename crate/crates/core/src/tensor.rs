//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! The graph is rebuilt for every step: each operation appends a node holding
//! its output value plus whatever the backward pass needs. Parameters enter the
//! graph as leaves; after [`Graph::backward`] their gradients can be read back
//! with [`Graph::grad`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Build a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`. Each output element accumulates over `k` in
/// ascending order regardless of `n`, so column slices of `b` give bit-identical
/// column slices of the product.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`. Four output columns are reduced side by
/// side; each still sums over `k` in ascending order.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for t in 0..k {
                let x = a_row[t];
                s0 += x * b0[t];
                s1 += x * b1[t];
                s2 += x * b2[t];
                s3 += x * b3[t];
            }
            out_row[j] += s0;
            out_row[j + 1] += s1;
            out_row[j + 2] += s2;
            out_row[j + 3] += s3;
            j += 4;
        }
        for jj in j..n {
            let b_row = &b[jj * k..(jj + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out_row[jj] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice {
        input: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    WeightedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape.clone(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape[0], t.shape[1]))
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Insert a tensor as a leaf; gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Clear every gradient buffer so `backward` may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// `x[m×d] + y` where `y` has `r` rows of width `d` (or is a length-`d`
    /// vector) and `r` divides `m`; row `i` of `x` receives row `i % r` of `y`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (m, d) = dims2(self.value(x), "add_broadcast")?;
        let ty = self.value(y);
        let y_rows = if ty.shape.len() == 1 { 1 } else { ty.rows() };
        if ty.numel() != y_rows * d || y_rows == 0 || m % y_rows != 0 {
            return Err(Error::Dimension {
                op: "add_broadcast",
                lhs: self.value(x).shape.clone(),
                rhs: ty.shape.clone(),
            });
        }
        let tx = self.value(x);
        let mut data = tx.data.clone();
        for (i, row) in data.chunks_mut(d.max(1)).enumerate().take(m) {
            let yr = &ty.data[(i % y_rows) * d..(i % y_rows + 1) * d];
            for (o, v) in row.iter_mut().zip(yr) {
                *o += v;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::new(vec![m, d], data)?, Op::AddBroadcast(x, y), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape.clone(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape.clone(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a), "softmax_rows")?;
        if k == 0 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: vec![n, k],
                rhs: vec![n, 1],
            });
        }
        let src = &self.value(a).data;
        let mut out = vec![0.0; n * k];
        for (row, o) in src.chunks(k).zip(out.chunks_mut(k)) {
            softmax_slice(row, o);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::SoftmaxRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Validation(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (n, d) = dims2(self.value(x), "layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: vec![n, d],
                    rhs: self.value(p).shape.clone(),
                });
            }
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for (i, row) in self.value(x).data.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Concatenate along the column (channel) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let (n, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != n {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(first).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stack along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let (_, d) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_rows")?;
            if c != d {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(first).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(&self.value(p).data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rectangular sub-block `[r0, r1) × [c0, c1)` of a 2-D tensor.
    pub fn slice(&mut self, a: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (n, d) = dims2(self.value(a), "slice")?;
        if rows.0 > rows.1 || rows.1 > n || cols.0 > cols.1 || cols.1 > d {
            return Err(Error::Index(format!(
                "slice rows {rows:?} cols {cols:?} of {n}x{d}"
            )));
        }
        let src = &self.value(a).data;
        let w = cols.1 - cols.0;
        let mut out = Vec::with_capacity((rows.1 - rows.0) * w);
        for i in rows.0..rows.1 {
            out.extend_from_slice(&src[i * d + cols.0..i * d + cols.1]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows.1 - rows.0, w], out)?,
            Op::Slice { input: a, rows, cols },
            rg,
        ))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[labels_i])`. Rows with zero weight are
    /// skipped entirely (their labels are not inspected).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (n, k) = dims2(self.value(logits), "cross_entropy")?;
        if labels.len() != n || weights.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![n, k],
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let src = &self.value(logits).data;
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let label = labels[i];
            if label >= k {
                return Err(Error::Index(format!("label {label} at row {i} with {k} classes")));
            }
            let row = &src[i * k..(i + 1) * k];
            softmax_slice(row, &mut probs[i * k..(i + 1) * k]);
            total += weights[i] * (log_sum_exp(row) - row[label]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Reverse traversal from a scalar `loss`; fills `grad` on every node that
    /// requires one. Must be followed by [`Graph::reset`] before running again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call reset first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(loss).shape.clone(),
                rhs: vec![],
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                with_grad(self, grads, *a, |ga| {
                    gemm_nt(g, &self.value(*b).data, ga, m, n, k);
                });
                with_grad(self, grads, *b, |gb| {
                    gemm_tn(&self.value(*a).data, g, gb, m, k, n);
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                with_grad(self, grads, *a, |ga| {
                    gemm_nn(g, &self.value(*b).data, ga, m, n, k);
                });
                with_grad(self, grads, *b, |gb| {
                    gemm_tn(g, &self.value(*a).data, gb, m, n, k);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad(self, grads, v, |gv| add_into(gv, g));
                }
            }
            Op::AddBroadcast(x, y) => {
                with_grad(self, grads, *x, |gx| add_into(gx, g));
                let d = self.value(*x).cols();
                let y_rows = self.value(*y).numel() / d.max(1);
                with_grad(self, grads, *y, |gy| {
                    if d == 0 {
                        return;
                    }
                    for (i, row) in g.chunks(d).enumerate() {
                        let r = i % y_rows;
                        add_into(&mut gy[r * d..(r + 1) * d], row);
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad(self, grads, *a, |ga| {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v * c;
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                with_grad(self, grads, *a, |ga| {
                    for ((o, v), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value.data;
                let k = node.value.cols();
                with_grad(self, grads, *a, |ga| {
                    for ((yr, gr), or) in y.chunks(k).zip(g.chunks(k)).zip(ga.chunks_mut(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gw = &self.value(*gain).data;
                with_grad(self, grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (i, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gw[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hr[j];
                        }
                        let scale = rstd[i] / d as f64;
                        let out = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            out[j] += scale * (d as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
                with_grad(self, grads, *gain, |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with_grad(self, grads, *bias, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    with_grad(self, grads, p, |gp| {
                        for i in 0..n {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    with_grad(self, grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Slice { input, rows, cols } => {
                let d = self.value(*input).cols();
                let w = cols.1 - cols.0;
                with_grad(self, grads, *input, |gi| {
                    for (r, i) in (rows.0..rows.1).enumerate() {
                        add_into(
                            &mut gi[i * d + cols.0..i * d + cols.1],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::WeightedCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let upstream = g[0];
                with_grad(self, grads, *logits, |gl| {
                    for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = upstream * w;
                        let row = &mut gl[i * k..(i + 1) * k];
                        for (j, o) in row.iter_mut().enumerate() {
                            let target = if j == label { 1.0 } else { 0.0 };
                            *o += s * (probs[i * k + j] - target);
                        }
                    }
                });
            }
            Op::Reshape(a) => with_grad(self, grads, *a, |ga| add_into(ga, g)),
            Op::Sum(a) => {
                let upstream = g[0];
                with_grad(self, grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += upstream;
                    }
                });
            }
        }
    }
}

fn with_grad(
    graph: &Graph,
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let value = &graph.nodes[v.0].value;
    if !value.requires_grad {
        return;
    }
    let len = value.numel();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Masked mean cross entropy: mean over rows with `mask[i] == 1` of
/// `−log softmax(logits_i)[labels_i]`. An all-zero mask yields a constant 0.
pub fn cross_entropy_masked(
    graph: &mut Graph,
    logits: Var,
    labels: &[usize],
    mask: &[u8],
) -> Result<Var> {
    let k = graph.value(logits).cols();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Index(format!("label {l} at row {i} with {k} classes")));
    }
    if let Some(&m) = mask.iter().find(|&&m| m > 1) {
        return Err(Error::Validation(format!("mask entry {m} not in {{0,1}}")));
    }
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    let w = 1.0 / count as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m == 1 { w } else { 0.0 }).collect();
    graph.weighted_cross_entropy(logits, labels, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a.at2(i, t) * b.at2(t, j);
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let r = g.constant(random(&[3, 2], &mut rng));
        let c = g.matmul(z, r).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let expected = naive_matmul(&a, &b);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_oracle() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0; 4], vec![1.0, 2.0, 3.0, 3.0]]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!(v[..4].iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let e: Vec<f64> = [1.0f64, 2.0, 3.0, 3.0].iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        for (p, ei) in v[4..].iter().zip(&e) {
            assert!((p - ei / s).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0; 4], vec![1.0, -2.0, 0.5, 4.0]]));
        let ones = g.constant(Tensor::full(&[4], 1.0));
        let zeros = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data()[..4].iter().all(|&v| v == 0.0));
        let row = [1.0, -2.0, 0.5, 4.0];
        let mu = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
        for (o, r) in g.value(y).data()[4..].iter().zip(row) {
            assert!((o - (r - mu) / (var + 1e-5).sqrt()).abs() < 1e-12);
        }

        let bias = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(&g.value(y).data()[4..], &[0.1, 0.2, 0.3, 0.4]);
        assert!(g.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 4]));
        let l = cross_entropy_masked(&mut g, logits, &[0, 1, 3], &[1, 1, 1]).unwrap();
        assert!((g.scalar_value(l) - 4f64.ln()).abs() < 1e-12);
        let l = cross_entropy_masked(&mut g, logits, &[0, 1, 3], &[0, 0, 0]).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        assert!(matches!(
            cross_entropy_masked(&mut g, logits, &[0, 4, 1], &[1, 1, 1]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&[3, 5], &mut rng);
        let labels = [4, 0, 2];
        let mask = [1u8, 0, 1];
        let mut expected = 0.0;
        for i in [0usize, 2] {
            let row: Vec<f64> = (0..5).map(|j| t.at2(i, j)).collect();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[labels[i]].exp() / denom).ln();
        }
        expected /= 2.0;
        let mut g = Graph::new();
        let x = g.constant(t);
        let l = cross_entropy_masked(&mut g, x, &labels, &mask).unwrap();
        assert!((g.scalar_value(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn concat_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 0]));
        let b = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c), g.value(b));
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![9.0]]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0]);
        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(g.concat_cols(&[a, bad]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0; 6]);
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        g.reset();
        let z = g.scale(p, 0.0);
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_gradient_splits() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::zeros(&[2, 2]));
        let b = g.param(&Tensor::zeros(&[2, 3]));
        let c = g.concat_cols(&[a, b]).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 6]);
    }
}
