use super::kernels::{self, Reduction};
use super::{Scalar, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: S },
    MatMul { a: TensorId, b: TensorId },
    MatMulNt { a: TensorId, b: TensorId },
    AddRowBias { x: TensorId, bias: TensorId },
    Gelu { x: TensorId },
    SoftmaxRows { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    PermuteRows { x: TensorId, perm: Vec<usize> },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SumAll { x: TensorId },
    Upsample { x: TensorId, in_h: usize, in_w: usize, factor: usize, wrap_x: bool },
    CrossEntropyMean { logits: TensorId, labels: Vec<u8> },
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

/// Single-threaded record of tensor operations. Nodes are appended in
/// topological order by construction; one [`Tape::backward`] traversal fills
/// the gradients of every `requires_grad` tensor the loss depends on.
/// Repeated backward calls accumulate into existing gradient buffers until
/// [`Tape::zero_grads`] resets them.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of tensors recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn leaf(
        &mut self,
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if data.len() != numel(&shape) {
            return Err(TensorError::DataLength {
                expected: numel(&shape),
                got: data.len(),
            });
        }
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: S) -> Result<TensorId, TensorError> {
        self.constant(vec![v], vec![1])
    }

    fn push(
        &mut self,
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<S>,
    ) -> Result<TensorId, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        Ok(id)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.nodes[id.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::BadRank {
                op,
                expected: "a 2-d tensor",
                got: self.nodes[id.0].shape.clone(),
            }),
        }
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        self.push(data, shape, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        self.push(data, shape, rg, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        self.push(data, shape, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Scale { x, c })
    }

    /// C[m,n] = A[m,k] @ B[k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let data = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.needs_grad(&[a, b]);
        self.push(data, vec![m, n], rg, Op::MatMul { a, b })
    }

    /// C[m,n] = A[m,k] @ B[n,k]^T.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, ka],
                right: vec![n, kb],
            });
        }
        let data = kernels::matmul_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.needs_grad(&[a, b]);
        self.push(data, vec![m, n], rg, Op::MatMulNt { a, b })
    }

    /// Adds a `[n]` bias vector to every row of `x[rows, n]`.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (rows, n) = self.dims2(x, "add_row_bias")?;
        if self.nodes[bias.0].data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                left: vec![rows, n],
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for c in 0..n {
                data[r * n + c] = data[r * n + c] + self.nodes[bias.0].data[c];
            }
        }
        let rg = self.needs_grad(&[x, bias]);
        self.push(data, vec![rows, n], rg, Op::AddRowBias { x, bias })
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Gelu { x })
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.dims2(x, "softmax_rows")?;
        let data = kernels::softmax_rows(&self.nodes[x.0].data, rows, cols, Reduction::Sequential)
            .ok_or(TensorError::NonFinite { op: "softmax_rows" })?;
        let rg = self.needs_grad(&[x]);
        self.push(data, vec![rows, cols], rg, Op::SoftmaxRows { x })
    }

    /// Normalizes the last axis of `x[..., n]` to zero mean and unit variance,
    /// then applies the `[n]` gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().ok_or(TensorError::EmptyInput { op: "layer_norm" })?;
        if self.nodes[gain.0].data.len() != n || self.nodes[bias.0].data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape.clone(),
                right: self.nodes[gain.0].shape.clone(),
            });
        }
        let rows = numel(&shape) / n;
        let data = kernels::layer_norm(
            &self.nodes[x.0].data,
            &self.nodes[gain.0].data,
            &self.nodes[bias.0].data,
            rows,
            n,
        );
        let rg = self.needs_grad(&[x, gain, bias]);
        self.push(data, shape, rg, Op::LayerNorm { x, gain, bias })
    }

    /// Reorders the rows of `x` so that output row `i` is input row `perm[i]`.
    /// `perm` must be a permutation of `0..rows`.
    pub fn permute_rows(&mut self, x: TensorId, perm: Vec<usize>) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.dims2(x, "permute_rows")?;
        if perm.len() != rows || !is_permutation(&perm) {
            return Err(TensorError::InvalidArgument {
                op: "permute_rows",
                what: format!("perm of length {} is not a permutation of 0..{rows}", perm.len()),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); rows * cols];
        for (i, &s) in perm.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(&src[s * cols..(s + 1) * cols]);
        }
        let rg = self.needs_grad(&[x]);
        self.push(data, vec![rows, cols], rg, Op::PermuteRows { x, perm })
    }

    /// Stacks 2-d tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![total_rows, cols],
                    right: vec![r, c],
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.needs_grad(parts);
        self.push(data, vec![total_rows, cols], rg, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Concatenates 2-d tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows, total_cols],
                    right: vec![r, c],
                });
            }
            total_cols += c;
        }
        let mut data = vec![S::zero(); rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims2(p, "concat_cols")?;
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let rg = self.needs_grad(parts);
        self.push(data, vec![rows, total_cols], rg, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let mut acc = S::zero();
        for &v in &self.nodes[x.0].data {
            acc = acc + v;
        }
        let rg = self.needs_grad(&[x]);
        self.push(vec![acc], vec![1], rg, Op::SumAll { x })
    }

    /// Bilinear upsampling of a `[in_h * in_w, ch]` token grid by `factor`.
    pub fn upsample_bilinear(
        &mut self,
        x: TensorId,
        in_h: usize,
        in_w: usize,
        factor: usize,
        wrap_x: bool,
    ) -> Result<TensorId, TensorError> {
        let (rows, ch) = self.dims2(x, "upsample_bilinear")?;
        if rows != in_h * in_w || factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_bilinear",
                what: format!("rows {rows} vs grid {in_h}x{in_w}, factor {factor}"),
            });
        }
        let data = kernels::upsample_bilinear(&self.nodes[x.0].data, in_h, in_w, ch, factor, wrap_x);
        let rg = self.needs_grad(&[x]);
        self.push(
            data,
            vec![in_h * factor * in_w * factor, ch],
            rg,
            Op::Upsample { x, in_h, in_w, factor, wrap_x },
        )
    }

    /// Mean cross-entropy between row-wise logits and integer labels.
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        labels: &[u8],
    ) -> Result<TensorId, TensorError> {
        let (rows, classes) = self.dims2(logits, "cross_entropy_mean")?;
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                left: vec![rows, classes],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_mean",
                what: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let probs = kernels::softmax_rows(&self.nodes[logits.0].data, rows, classes, Reduction::Sequential)
            .ok_or(TensorError::NonFinite { op: "cross_entropy_mean" })?;
        let mut acc = S::zero();
        let tiny = S::from_f64(1e-30);
        for (r, &label) in labels.iter().enumerate() {
            acc = acc - (probs[r * classes + label as usize] + tiny).ln();
        }
        let loss = acc / S::from_f64(rows as f64);
        let rg = self.needs_grad(&[logits]);
        self.push(vec![loss], vec![1], rg, Op::CrossEntropyMean { logits, labels: labels.to_vec() })
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of every
    /// `requires_grad` tensor reachable from `loss` are accumulated in place.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::LossNotScalar {
                got: self.nodes[loss.0].shape.clone(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Leaf gradients accumulate across calls; intermediate gradients are
        // per-sweep scratch and must start clean.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.accumulate(loss, &[S::one()]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &grad, &op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let len = self.nodes[id.0].data.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![S::zero(); len]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    fn backprop_node(&mut self, node: usize, grad: &[S], op: &Op<S>) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, grad);
                let neg: Vec<S> = grad.iter().map(|&g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da = zip_map(grad, &self.nodes[b.0].data, |g, y| g * y);
                let db = zip_map(grad, &self.nodes[a.0].data, |g, x| g * x);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<S> = grad.iter().map(|&g| g * *c).collect();
                self.accumulate(*x, &dx);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let da = kernels::matmul_nt(grad, &self.nodes[b.0].data, m, n, k);
                let db = kernels::matmul_tn(&self.nodes[a.0].data, grad, m, k, n);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let da = kernels::matmul(grad, &self.nodes[b.0].data, m, n, k);
                let db = kernels::matmul_tn(grad, &self.nodes[a.0].data, m, n, k);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(*x, grad);
                let n = self.nodes[bias.0].data.len();
                let rows = grad.len() / n;
                let mut db = vec![S::zero(); n];
                for r in 0..rows {
                    for c in 0..n {
                        db[c] = db[c] + grad[r * n + c];
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::Gelu { x } => {
                let dx = zip_map(grad, &self.nodes[x.0].data, |g, v| g * kernels::gelu_grad(v));
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (rows, cols) = (self.nodes[node].shape[0], self.nodes[node].shape[1]);
                let y = &self.nodes[node].data;
                let mut dx = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let y_row = &y[r * cols..(r + 1) * cols];
                    let g_row = &grad[r * cols..(r + 1) * cols];
                    let mut dot = S::zero();
                    for (&g, &p) in g_row.iter().zip(y_row) {
                        dot = dot + g * p;
                    }
                    let dx_row = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dx_row[c] = y_row[c] * (g_row[c] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let shape = &self.nodes[node].shape;
                let n = *shape.last().expect("layer_norm output is non-empty");
                let rows = numel(shape) / n;
                let eps = S::from_f64(kernels::LAYER_NORM_EPS);
                let inv_n = S::one() / S::from_f64(n as f64);
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gain.0].data;
                let mut dx = vec![S::zero(); rows * n];
                let mut dgain = vec![S::zero(); n];
                let mut dbias = vec![S::zero(); n];
                for r in 0..rows {
                    let x_row = &xv[r * n..(r + 1) * n];
                    let g_row = &grad[r * n..(r + 1) * n];
                    let mut mean = S::zero();
                    for &v in x_row {
                        mean = mean + v;
                    }
                    mean = mean * inv_n;
                    let mut var = S::zero();
                    for &v in x_row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let inv_std = S::one() / (var + eps).sqrt();
                    // h = dL/dx_hat; dx = (h - mean(h) - x_hat * mean(h .* x_hat)) / std
                    let mut mean_h = S::zero();
                    let mut mean_hx = S::zero();
                    for c in 0..n {
                        let xh = (x_row[c] - mean) * inv_std;
                        let h = g_row[c] * gv[c];
                        mean_h = mean_h + h;
                        mean_hx = mean_hx + h * xh;
                        dgain[c] = dgain[c] + g_row[c] * xh;
                        dbias[c] = dbias[c] + g_row[c];
                    }
                    mean_h = mean_h * inv_n;
                    mean_hx = mean_hx * inv_n;
                    let dx_row = &mut dx[r * n..(r + 1) * n];
                    for c in 0..n {
                        let xh = (x_row[c] - mean) * inv_std;
                        let h = g_row[c] * gv[c];
                        dx_row[c] = (h - mean_h - xh * mean_hx) * inv_std;
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::PermuteRows { x, perm } => {
                let cols = self.nodes[node].shape[1];
                let mut dx = vec![S::zero(); grad.len()];
                for (i, &s) in perm.iter().enumerate() {
                    for c in 0..cols {
                        dx[s * cols + c] = dx[s * cols + c] + grad[i * cols + c];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[node].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p.0].shape[0];
                    let slice = grad[offset * cols..(offset + rows) * cols].to_vec();
                    self.accumulate(p, &slice);
                    offset += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[node].shape[0];
                let total_cols = self.nodes[node].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    let mut dp = vec![S::zero(); rows * c];
                    for r in 0..rows {
                        dp[r * c..(r + 1) * c].copy_from_slice(
                            &grad[r * total_cols + offset..r * total_cols + offset + c],
                        );
                    }
                    self.accumulate(p, &dp);
                    offset += c;
                }
            }
            Op::SumAll { x } => {
                let g = grad[0];
                let dx = vec![g; self.nodes[x.0].data.len()];
                self.accumulate(*x, &dx);
            }
            Op::Upsample { x, in_h, in_w, factor, wrap_x } => {
                let ch = self.nodes[x.0].shape[1];
                let out_w = in_w * factor;
                let out_h = in_h * factor;
                let mut dx = vec![S::zero(); self.nodes[x.0].data.len()];
                for oy in 0..out_h {
                    let (y0, y1, fy) = kernels::axis_sample::<S>(oy, *factor, *in_h, false);
                    for ox in 0..out_w {
                        let (x0, x1, fx) = kernels::axis_sample::<S>(ox, *factor, *in_w, *wrap_x);
                        let g = &grad[(oy * out_w + ox) * ch..(oy * out_w + ox + 1) * ch];
                        let w00 = (S::one() - fy) * (S::one() - fx);
                        let w01 = (S::one() - fy) * fx;
                        let w10 = fy * (S::one() - fx);
                        let w11 = fy * fx;
                        for c in 0..ch {
                            dx[(y0 * in_w + x0) * ch + c] = dx[(y0 * in_w + x0) * ch + c] + w00 * g[c];
                            dx[(y0 * in_w + x1) * ch + c] = dx[(y0 * in_w + x1) * ch + c] + w01 * g[c];
                            dx[(y1 * in_w + x0) * ch + c] = dx[(y1 * in_w + x0) * ch + c] + w10 * g[c];
                            dx[(y1 * in_w + x1) * ch + c] = dx[(y1 * in_w + x1) * ch + c] + w11 * g[c];
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropyMean { logits, labels } => {
                let (rows, classes) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let probs = kernels::softmax_rows(
                    &self.nodes[logits.0].data,
                    rows,
                    classes,
                    Reduction::Sequential,
                )
                .expect("forward pass already validated logits");
                let g = grad[0] / S::from_f64(rows as f64);
                let mut dl = probs;
                for (r, &label) in labels.iter().enumerate() {
                    let idx = r * classes + label as usize;
                    dl[idx] = dl[idx] - S::one();
                }
                for v in dl.iter_mut() {
                    *v = *v * g;
                }
                self.accumulate(*logits, &dl);
            }
        }
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::MatMul { .. } => "matmul",
        Op::MatMulNt { .. } => "matmul_nt",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::Gelu { .. } => "gelu",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::PermuteRows { .. } => "permute_rows",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SumAll { .. } => "sum_all",
        Op::Upsample { .. } => "upsample_bilinear",
        Op::CrossEntropyMean { .. } => "cross_entropy_mean",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut t = tape();
        let eye = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let c = t.matmul(eye, m).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projection_row() {
        let mut t = tape();
        let a = t.constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![5.0, 7.0], vec![2, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut t = tape();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t = tape();
        let x = t.constant(vec![0.0, 0.0, 0.0], vec![1, 3]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        for &v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logits_do_not_overflow() {
        let mut t = tape();
        let x = t.constant(vec![1000.0, 0.0], vec![1, 2]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert!((t.data(y)[0] - 1.0).abs() < 1e-6);
        assert!(t.data(y)[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_hand_value() {
        let mut t = tape();
        let x = t.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert!((t.data(y)[0] - 0.7311).abs() < 1e-4);
        assert!((t.data(y)[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn gelu_anchor_points() {
        let mut t = tape();
        let x = t.constant(vec![0.0, 10.0, 1.0], vec![3]).unwrap();
        let y = t.gelu(x).unwrap();
        assert_eq!(t.data(y)[0], 0.0);
        assert!((t.data(y)[1] - 10.0).abs() < 1e-3);
        assert!((t.data(y)[2] - 0.8412).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let mut t = tape();
        let x = t.constant(vec![3.0, 3.0, 3.0, 3.0], vec![1, 4]).unwrap();
        let gain = t.constant(vec![1.0; 4], vec![4]).unwrap();
        let bias = t.constant(vec![0.0; 4], vec![4]).unwrap();
        let y = t.layer_norm(x, gain, bias).unwrap();
        for &v in t.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut t = tape();
        let x = t.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let gain = t.constant(vec![1.0; 2], vec![2]).unwrap();
        let bias = t.constant(vec![0.0; 2], vec![2]).unwrap();
        let y = t.layer_norm(x, gain, bias).unwrap();
        assert!((t.data(y)[0] - 1.0).abs() < 1e-3);
        assert!((t.data(y)[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_zero_gain_collapses_to_bias() {
        let mut t = tape();
        let x = t.constant(vec![0.3, -2.0, 9.5, 0.0, 1.0, 2.0], vec![2, 3]).unwrap();
        let gain = t.constant(vec![0.0; 3], vec![3]).unwrap();
        let bias = t.constant(vec![4.5; 3], vec![3]).unwrap();
        let y = t.layer_norm(x, gain, bias).unwrap();
        for &v in t.data(y) {
            assert_eq!(v, 4.5);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = tape();
        let x = t.leaf(vec![0.5, -1.0, 2.0, 7.0, 0.0, 3.0], vec![2, 3], true).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_quadratic() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::LossNotScalar { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = tape();
        let x = t.constant(vec![1e300], vec![1]).unwrap();
        assert!(matches!(t.mul(x, x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn permute_rows_round_trip() {
        let mut t = tape();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]).unwrap();
        let perm = vec![2, 0, 1];
        let y = t.permute_rows(x, perm.clone()).unwrap();
        assert_eq!(t.data(y), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        let mut inverse = vec![0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let z = t.permute_rows(y, inverse).unwrap();
        assert_eq!(t.data(z), t.data(x));
    }

    #[test]
    fn permute_rows_rejects_non_permutation() {
        let mut t = tape();
        let x = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(t.permute_rows(x, vec![0, 0]).is_err());
    }

    #[test]
    fn concat_cols_splits_gradient() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        let b = t.leaf(vec![3.0], vec![1, 1], true).unwrap();
        let cat = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.data(cat), &[1.0, 2.0, 3.0]);
        let w = t.constant(vec![1.0, 10.0, 100.0], vec![1, 3]).unwrap();
        let prod = t.mul(cat, w).unwrap();
        let loss = t.sum_all(prod).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 10.0]);
        assert_eq!(t.grad(b).unwrap(), &[100.0]);
    }

    #[test]
    fn upsample_reproduces_tokens_at_block_aligned_pixels() {
        let mut t = tape();
        // 1x2 grid, 1 channel, factor 4.
        let x = t.constant(vec![1.0, 5.0], vec![2, 1]).unwrap();
        let y = t.upsample_bilinear(x, 1, 2, 4, false).unwrap();
        let d = t.data(y);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[4], 5.0);
        // Clamped tail keeps the last token's value.
        assert_eq!(d[7], 5.0);
        // Interior interpolates linearly.
        assert!((d[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_wraps_across_the_width_seam() {
        let mut t = tape();
        let x = t.constant(vec![1.0, 5.0], vec![2, 1]).unwrap();
        let y = t.upsample_bilinear(x, 1, 2, 4, true).unwrap();
        let d = t.data(y);
        // Past the last token the interpolation heads back toward token 0.
        assert!((d[6] - 3.0).abs() < 1e-12);
        assert!((d[7] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_small() {
        let mut t = tape();
        let logits = t.leaf(vec![20.0, 0.0, 0.0, 20.0], vec![2, 2], true).unwrap();
        let loss = t.cross_entropy_mean(logits, &[0, 1]).unwrap();
        assert!(t.value(loss) < 1e-6);
    }
}
