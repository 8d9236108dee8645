//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Operations execute eagerly and push a record onto the tape; `backward`
//! replays the records in reverse, applying each operation's local gradient
//! rule. Gradient accumulation is additive, so a value consumed by several
//! operations receives the sum of their contributions. A tape and its
//! tensors belong to one worker at a time; independent tapes may run
//! concurrently on disjoint parameter copies.

use crate::error::{Error, Result};
use crate::tensor::{add_scaled, matmul_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded operation with the node ids it touched.
#[derive(Clone, Debug)]
enum TapeOp {
    MatMul { a: usize, b: usize, out: usize },
    Transpose { a: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    /// out = s * M for a 1x1 scalar node `s`.
    ScaleByScalar { mat: usize, scalar: usize, out: usize },
    /// out[i, :] = mat[i, :] + bias (bias is 1 x cols).
    AddRowBroadcast { mat: usize, bias: usize, out: usize },
    /// Masked entries produce exactly 0 and receive no gradient.
    RowSoftmax { a: usize, mask: Option<Vec<bool>>, out: usize },
    LeakyRelu { a: usize, slope: f64, out: usize },
    Sigmoid { a: usize, out: usize },
    ConcatCols { a: usize, b: usize, out: usize },
    SelectRows { a: usize, idx: Vec<usize>, out: usize },
    Sum { a: usize, out: usize },
    /// x: V x d -> out: V*V x d with row i*V+j = |x_i - x_j|.
    PairwiseAbsDiff { a: usize, out: usize },
    /// x: V x d -> out: V x V with out(i,j) = <x_i,x_j> / (|x_i||x_j| + eps).
    CosineGram { a: usize, eps: f64, out: usize },
    /// Straight-through top-k: `kept` is the forward mask; gradient flows
    /// only through retained entries.
    TopKRows { a: usize, kept: Vec<bool>, out: usize },
    /// out[i, :] = a[i, :] / sum(a[i, :]).
    RowRenormalize { a: usize, out: usize },
    /// Summed cross-entropy of row-softmaxed logits against class indices.
    CrossEntropySum { logits: usize, truth: Vec<usize>, out: usize },
    Reshape { a: usize, out: usize },
}

/// Define-by-run computation tape. Rebuilt for every forward pass.
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    trainable: Vec<bool>,
    ops: Vec<TapeOp>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            trainable: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, trainable: bool) -> Var {
        let id = self.values.len();
        // Trainable nodes always expose a gradient, zero until backward runs.
        let grad = trainable.then(|| Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.grads.push(grad);
        self.trainable.push(trainable);
        Var(id)
    }

    /// Record a constant input. It participates in gradient flow as an
    /// intermediate but is not reported as trainable.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false)
    }

    /// Record a trainable input; its gradient accumulator starts at zero.
    pub fn trainable(&mut self, value: Tensor) -> Var {
        self.push(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Accumulated gradient, if any has flowed to this node. Trainable
    /// nodes always return `Some` (zeros when off the differentiated path).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.trainable[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.values[a.0].shape();
        let (br, bc) = self.values[b.0].shape();
        if ac != br {
            return Err(Error::shape("matmul", (ar, ac), (br, bc)));
        }
        let out = matmul_raw(&self.values[a.0], &self.values[b.0]);
        let v = self.push(out, false);
        self.ops.push(TapeOp::MatMul { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.values[a.0].transposed();
        let v = self.push(out, false);
        self.ops.push(TapeOp::Transpose { a: a.0, out: v.0 });
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, false)
    }

    fn elementwise_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        is_add: bool,
    ) -> Result<Var> {
        let (ar, ac) = self.values[a.0].shape();
        let (br, bc) = self.values[b.0].shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::shape(name, (ar, ac), (br, bc)));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = self.push(Tensor::new(ar, ac, data)?, false);
        let op = if is_add {
            TapeOp::Add { a: a.0, b: b.0, out: v.0 }
        } else {
            TapeOp::Sub { a: a.0, b: b.0, out: v.0 }
        };
        self.ops.push(op);
        Ok(v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].map(|x| c * x);
        let v = self.push(out, false);
        self.ops.push(TapeOp::Scale { a: a.0, c, out: v.0 });
        v
    }

    pub fn scale_by_scalar(&mut self, mat: Var, scalar: Var) -> Result<Var> {
        let s = &self.values[scalar.0];
        if s.shape() != (1, 1) {
            return Err(Error::shape("scale_by_scalar", self.values[mat.0].shape(), s.shape()));
        }
        let sv = s.item();
        let out = self.values[mat.0].map(|x| sv * x);
        let v = self.push(out, false);
        self.ops.push(TapeOp::ScaleByScalar {
            mat: mat.0,
            scalar: scalar.0,
            out: v.0,
        });
        Ok(v)
    }

    pub fn add_row_broadcast(&mut self, mat: Var, bias: Var) -> Result<Var> {
        let (mr, mc) = self.values[mat.0].shape();
        let (br, bc) = self.values[bias.0].shape();
        if br != 1 || bc != mc {
            return Err(Error::shape("add_row_broadcast", (mr, mc), (br, bc)));
        }
        let bias_row = self.values[bias.0].data().to_vec();
        let mut out = self.values[mat.0].clone();
        for i in 0..mr {
            for (o, &b) in out.data_mut()[i * mc..(i + 1) * mc].iter_mut().zip(&bias_row) {
                *o += b;
            }
        }
        let v = self.push(out, false);
        self.ops.push(TapeOp::AddRowBroadcast {
            mat: mat.0,
            bias: bias.0,
            out: v.0,
        });
        Ok(v)
    }

    /// Row-wise softmax with the row max subtracted before exponentiation.
    /// `mask`, when given, restricts each row's normalization set; masked
    /// entries are exactly 0 in the output.
    pub fn row_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (rows, cols) = self.values[a.0].shape();
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(Error::InvalidArg(format!(
                    "softmax mask length {} does not match {}x{}",
                    m.len(),
                    rows,
                    cols
                )));
            }
        }
        let keep = |m: &Option<Vec<bool>>, i: usize, j: usize| m.as_ref().is_none_or(|m| m[i * cols + j]);
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let row = self.values[a.0].row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if keep(&mask, i, j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyMask { row: i });
            }
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if keep(&mask, i, j) {
                    let e = (x - max).exp();
                    out.data_mut()[i * cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                if keep(&mask, i, j) {
                    out.data_mut()[i * cols + j] /= sum;
                }
            }
        }
        let v = self.push(out, false);
        self.ops.push(TapeOp::RowSoftmax { a: a.0, mask, out: v.0 });
        Ok(v)
    }

    /// Elementwise `x if x >= 0 else slope * x`; gradient at exactly 0 is
    /// `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.values[a.0].map(|x| if x >= 0.0 { x } else { slope * x });
        let v = self.push(out, false);
        self.ops.push(TapeOp::LeakyRelu { a: a.0, slope, out: v.0 });
        v
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| 1.0 / (1.0 + (-x).exp()));
        let v = self.push(out, false);
        self.ops.push(TapeOp::Sigmoid { a: a.0, out: v.0 });
        v
    }

    /// Per-row feature concatenation: [a | b].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.values[a.0].shape();
        let (br, bc) = self.values[b.0].shape();
        if ar != br {
            return Err(Error::shape("concat_cols", (ar, ac), (br, bc)));
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            data.extend_from_slice(self.values[a.0].row(i));
            data.extend_from_slice(self.values[b.0].row(i));
        }
        let v = self.push(Tensor::new(ar, ac + bc, data)?, false);
        self.ops.push(TapeOp::ConcatCols { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.values[a.0].shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArg(format!(
                "select_rows: index {} out of range for {} rows",
                bad, rows
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.values[a.0].row(i));
        }
        let v = self.push(Tensor::new(idx.len(), cols, data)?, false);
        self.ops.push(TapeOp::SelectRows {
            a: a.0,
            idx: idx.to_vec(),
            out: v.0,
        });
        Ok(v)
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.values[a.0].data().iter().sum();
        let v = self.push(Tensor::scalar(total), false);
        self.ops.push(TapeOp::Sum { a: a.0, out: v.0 });
        v
    }

    /// All pairwise absolute difference vectors: row i*V+j holds |x_i - x_j|.
    pub fn pairwise_abs_diff(&mut self, a: Var) -> Var {
        let (n, d) = self.values[a.0].shape();
        let mut data = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for j in 0..n {
                let (ri, rj) = (self.values[a.0].row(i), self.values[a.0].row(j));
                data.extend(ri.iter().zip(rj).map(|(&x, &y)| (x - y).abs()));
            }
        }
        let v = self.push(
            Tensor::new(n * n, d, data).expect("pairwise shape"),
            false,
        );
        self.ops.push(TapeOp::PairwiseAbsDiff { a: a.0, out: v.0 });
        v
    }

    /// Epsilon-regularized cosine similarity matrix:
    /// out(i,j) = <x_i, x_j> / (|x_i||x_j| + eps). Rows of zero norm yield 0.
    pub fn cosine_gram(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.values[a.0];
        let n = x.rows();
        let norms: Vec<f64> = (0..n)
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(&p, &q)| p * q).sum();
                out.data_mut()[i * n + j] = dot / (norms[i] * norms[j] + eps);
            }
        }
        let v = self.push(out, false);
        self.ops.push(TapeOp::CosineGram { a: a.0, eps, out: v.0 });
        v
    }

    /// Keep the k entries of largest magnitude per row, zero the rest.
    /// Ties break toward the lowest column index. Gradients flow only
    /// through retained entries.
    pub fn topk_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (rows, cols) = self.values[a.0].shape();
        if k == 0 || k > cols {
            return Err(Error::InvalidArg(format!(
                "topk_rows: k={} out of range for {} columns",
                k, cols
            )));
        }
        let mut kept = vec![false; rows * cols];
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let row = self.values[a.0].row(i);
            let mut order: Vec<usize> = (0..cols).collect();
            order.sort_by(|&p, &q| {
                row[q]
                    .abs()
                    .total_cmp(&row[p].abs())
                    .then(p.cmp(&q))
            });
            for &j in order.iter().take(k) {
                kept[i * cols + j] = true;
                out.data_mut()[i * cols + j] = row[j];
            }
        }
        let v = self.push(out, false);
        self.ops.push(TapeOp::TopKRows { a: a.0, kept, out: v.0 });
        Ok(v)
    }

    /// Divide each row by its sum.
    pub fn row_renormalize(&mut self, a: Var) -> Var {
        let (rows, cols) = self.values[a.0].shape();
        let mut out = self.values[a.0].clone();
        for i in 0..rows {
            let s: f64 = self.values[a.0].row(i).iter().sum();
            for x in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *x /= s;
            }
        }
        let v = self.push(out, false);
        self.ops.push(TapeOp::RowRenormalize { a: a.0, out: v.0 });
        v
    }

    /// -sum_i log softmax(logits_i)[truth_i], summed over rows.
    pub fn cross_entropy_sum(&mut self, logits: Var, truth: &[usize]) -> Result<Var> {
        let (rows, cols) = self.values[logits.0].shape();
        if truth.len() != rows {
            return Err(Error::InvalidArg(format!(
                "cross_entropy_sum: {} targets for {} rows",
                truth.len(),
                rows
            )));
        }
        if let Some(&bad) = truth.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidArg(format!(
                "cross_entropy_sum: class {} out of range for {} classes",
                bad, cols
            )));
        }
        let mut total = 0.0;
        for (i, &t) in truth.iter().enumerate() {
            let row = self.values[logits.0].row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = self.push(Tensor::scalar(total), false);
        self.ops.push(TapeOp::CrossEntropySum {
            logits: logits.0,
            truth: truth.to_vec(),
            out: v.0,
        });
        Ok(v)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = &self.values[a.0];
        if t.len() != rows * cols {
            return Err(Error::shape("reshape", t.shape(), (rows, cols)));
        }
        let out = Tensor::new(rows, cols, t.data().to_vec())?;
        let v = self.push(out, false);
        self.ops.push(TapeOp::Reshape { a: a.0, out: v.0 });
        Ok(v)
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Accumulate `d root / d node` into every node on `root`'s history.
    /// `root` must be 1x1. Repeated calls add another `d root / d tensor`
    /// into each trainable gradient; intermediate gradients are recomputed
    /// from scratch every pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (r, c) = self.values[root.0].shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        for i in 0..self.grads.len() {
            if !self.trainable[i] {
                self.grads[i] = None;
            }
        }
        self.accumulate(root.0, &Tensor::scalar(1.0));
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contribution: &Tensor) {
        match &mut self.grads[id] {
            Some(g) => add_scaled(g, contribution, 1.0),
            slot @ None => *slot = Some(contribution.clone()),
        }
    }

    fn backward_op(&mut self, op: &TapeOp) {
        match op {
            TapeOp::MatMul { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let d_a = matmul_raw(&d_out, &self.values[*b].transposed());
                let d_b = matmul_raw(&self.values[*a].transposed(), &d_out);
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }
            TapeOp::Transpose { a, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &d_out.transposed());
            }
            TapeOp::Add { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &d_out);
                self.accumulate(*b, &d_out);
            }
            TapeOp::Sub { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &d_out);
                self.accumulate(*b, &d_out.map(|v| -v));
            }
            TapeOp::Scale { a, c, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &d_out.map(|v| c * v));
            }
            TapeOp::ScaleByScalar { mat, scalar, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let s = self.values[*scalar].item();
                let d_mat = d_out.map(|v| s * v);
                let d_s: f64 = d_out
                    .data()
                    .iter()
                    .zip(self.values[*mat].data())
                    .map(|(&g, &m)| g * m)
                    .sum();
                self.accumulate(*mat, &d_mat);
                self.accumulate(*scalar, &Tensor::scalar(d_s));
            }
            TapeOp::AddRowBroadcast { mat, bias, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let cols = d_out.cols();
                let mut d_bias = Tensor::zeros(1, cols);
                for i in 0..d_out.rows() {
                    for (db, &g) in d_bias.data_mut().iter_mut().zip(d_out.row(i)) {
                        *db += g;
                    }
                }
                self.accumulate(*mat, &d_out);
                self.accumulate(*bias, &d_bias);
            }
            TapeOp::RowSoftmax { a, mask, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let y = &self.values[*out];
                let (rows, cols) = y.shape();
                let keep =
                    |i: usize, j: usize| mask.as_ref().is_none_or(|m| m[i * cols + j]);
                let mut d_a = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    let dot: f64 = (0..cols)
                        .filter(|&j| keep(i, j))
                        .map(|j| d_out.get(i, j) * y.get(i, j))
                        .sum();
                    for j in 0..cols {
                        if keep(i, j) {
                            d_a.data_mut()[i * cols + j] =
                                y.get(i, j) * (d_out.get(i, j) - dot);
                        }
                    }
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::LeakyRelu { a, slope, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let x = self.values[*a].clone();
                let mut d_a = d_out;
                for (g, &v) in d_a.data_mut().iter_mut().zip(x.data()) {
                    // Gradient at exactly 0 is defined as `slope`.
                    if v <= 0.0 {
                        *g *= slope;
                    }
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::Sigmoid { a, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let y = self.values[*out].clone();
                let mut d_a = d_out;
                for (g, &s) in d_a.data_mut().iter_mut().zip(y.data()) {
                    *g *= s * (1.0 - s);
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::ConcatCols { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let ac = self.values[*a].cols();
                let bc = self.values[*b].cols();
                self.accumulate(*a, &d_out.slice_cols(0, ac));
                self.accumulate(*b, &d_out.slice_cols(ac, ac + bc));
            }
            TapeOp::SelectRows { a, idx, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let (rows, cols) = self.values[*a].shape();
                let mut d_a = Tensor::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (slot, &g) in d_a.data_mut()[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(d_out.row(r))
                    {
                        *slot += g;
                    }
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::Sum { a, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let g = d_out.item();
                let (rows, cols) = self.values[*a].shape();
                self.accumulate(*a, &Tensor::filled(rows, cols, g));
            }
            TapeOp::PairwiseAbsDiff { a, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let x = self.values[*a].clone();
                let (n, d) = x.shape();
                let mut d_a = Tensor::zeros(n, d);
                for i in 0..n {
                    for j in 0..n {
                        let g_row = d_out.row(i * n + j);
                        for (c, &g) in g_row.iter().enumerate() {
                            let s = (x.get(i, c) - x.get(j, c)).signum_or_zero();
                            d_a.data_mut()[i * d + c] += g * s;
                            d_a.data_mut()[j * d + c] -= g * s;
                        }
                    }
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::CosineGram { a, eps, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let x = self.values[*a].clone();
                let n = x.rows();
                let d = x.cols();
                let norms: Vec<f64> = (0..n)
                    .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let mut d_a = Tensor::zeros(n, d);
                for i in 0..n {
                    for j in 0..n {
                        let g = d_out.get(i, j);
                        if g == 0.0 {
                            continue;
                        }
                        let dot: f64 =
                            x.row(i).iter().zip(x.row(j)).map(|(&p, &q)| p * q).sum();
                        let denom = norms[i] * norms[j] + eps;
                        if i == j {
                            // d/dx_i [n_i^2 / (n_i^2 + eps)] = 2 eps x_i / denom^2
                            let c = 2.0 * g * eps / (denom * denom);
                            for k in 0..d {
                                d_a.data_mut()[i * d + k] += c * x.get(i, k);
                            }
                        } else {
                            for k in 0..d {
                                d_a.data_mut()[i * d + k] += g * x.get(j, k) / denom;
                                d_a.data_mut()[j * d + k] += g * x.get(i, k) / denom;
                            }
                            if norms[i] > 0.0 {
                                let c = g * dot * norms[j] / (norms[i] * denom * denom);
                                for k in 0..d {
                                    d_a.data_mut()[i * d + k] -= c * x.get(i, k);
                                }
                            }
                            if norms[j] > 0.0 {
                                let c = g * dot * norms[i] / (norms[j] * denom * denom);
                                for k in 0..d {
                                    d_a.data_mut()[j * d + k] -= c * x.get(j, k);
                                }
                            }
                        }
                    }
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::TopKRows { a, kept, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut d_a = d_out;
                for (g, &k) in d_a.data_mut().iter_mut().zip(kept) {
                    if !k {
                        *g = 0.0;
                    }
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::RowRenormalize { a, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let x = &self.values[*a];
                let y = &self.values[*out];
                let (rows, cols) = x.shape();
                let mut d_a = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    let s: f64 = x.row(i).iter().sum();
                    let dot: f64 = d_out
                        .row(i)
                        .iter()
                        .zip(y.row(i))
                        .map(|(&g, &v)| g * v)
                        .sum();
                    for j in 0..cols {
                        d_a.data_mut()[i * cols + j] = (d_out.get(i, j) - dot) / s;
                    }
                }
                self.accumulate(*a, &d_a);
            }
            TapeOp::CrossEntropySum { logits, truth, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let g = d_out.item();
                let l = &self.values[*logits];
                let (rows, cols) = l.shape();
                let mut d_l = Tensor::zeros(rows, cols);
                for (i, &t) in truth.iter().enumerate() {
                    let row = l.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (j, &e) in exps.iter().enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        d_l.data_mut()[i * cols + j] = g * (e / sum - onehot);
                    }
                }
                self.accumulate(*logits, &d_l);
            }
            TapeOp::Reshape { a, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let (rows, cols) = self.values[*a].shape();
                let d_a = Tensor::new(rows, cols, d_out.data().to_vec()).expect("reshape grad");
                self.accumulate(*a, &d_a);
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// signum with the subgradient convention sign(0) = 0.
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
