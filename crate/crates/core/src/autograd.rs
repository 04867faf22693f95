//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every node of one computation graph. Operations append
//! nodes and return [`Var`] handles, so the graph is acyclic by construction
//! and a reverse id walk is a valid topological order. Gradients accumulate
//! additively when a value feeds several consumers; a tape is built fresh for
//! every training step, which is what zeroes gradients between steps.

use crate::error::{CoreError, Result};
use crate::gating;
use crate::kernels;
use crate::loss;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Exp(Var),
    Log(Var),
    Gelu(Var),
    RowSoftmax { x: Var, valid_cols: usize },
    RowLogSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv1dSame { x: Var, kernel: Var, bias: Var },
    AdaptiveAvgPool { x: Var },
    TakeRows { x: Var, start: usize },
    TakeCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    MeanRows { x: Var, rows: usize },
    Sum(Var),
    Mean(Var),
    Pick { x: Var, index: usize },
    Reshape { x: Var },
    /// Hard top-k binarization with straight-through backward.
    TopK { scores: Var },
    /// Hard threshold binarization; same straight-through rule.
    Threshold { scores: Var },
    /// Multiply a tensor by one element of a gate vector.
    MulGate { x: Var, gates: Var, index: usize },
    Ctc { log_probs: Var, targets: Vec<usize>, input_len: usize },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow { .. } => "add_row",
        Op::Scale { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::MatMul { .. } => "matmul",
        Op::MatMulNT { .. } => "matmul_nt",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Gelu(..) => "gelu",
        Op::RowSoftmax { .. } => "row_softmax",
        Op::RowLogSoftmax { .. } => "row_log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1dSame { .. } => "conv1d_same",
        Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
        Op::TakeRows { .. } => "take_rows",
        Op::TakeCols { .. } => "take_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::MeanRows { .. } => "mean_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Pick { .. } => "pick",
        Op::Reshape { .. } => "reshape",
        Op::TopK { .. } => "topk_gates",
        Op::Threshold { .. } => "threshold_gates",
        Op::MulGate { .. } => "mul_gate",
        Op::Ctc { .. } => "ctc_loss",
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// path reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.id];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Gradient as a flat slice without copying.
    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.id].grad.as_deref()
    }

    // ── elementwise and broadcast ops ───────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.id].value.shape, &self.nodes[b.id].value.shape);
        if sa != sb {
            return Err(CoreError::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.id].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.id].value.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.id].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.id].value.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.id].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.id].value.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    /// Broadcast-add a length-C vector to every row of an R×C tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[x.id].value.rows_cols();
        if self.nodes[row.id].value.numel() != cols {
            return Err(CoreError::shape(
                "add_row",
                format!(
                    "row has {} elements, tensor has {} columns",
                    self.nodes[row.id].value.numel(),
                    cols
                ),
            ));
        }
        let mut data = self.nodes[x.id].value.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[row.id].value.data[c];
            }
        }
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor { shape, data }, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.id].value.data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.id].value.data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::AddConst { x }, rg)
    }

    // ── matrix products ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.id].value.dims2("matmul")?;
        let (k2, n) = self.nodes[b.id].value.dims2("matmul")?;
        if k != k2 {
            return Err(CoreError::shape("matmul", format!("{}x{} @ {}x{}", m, k, k2, n)));
        }
        let data = kernels::matmul_nn(
            &self.nodes[a.id].value.data,
            &self.nodes[b.id].value.data,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul { a, b }, rg))
    }

    /// a @ b^T for a: m×k, b: n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.id].value.dims2("matmul_nt")?;
        let (n, k2) = self.nodes[b.id].value.dims2("matmul_nt")?;
        if k != k2 {
            return Err(CoreError::shape("matmul_nt", format!("{}x{} @ ({}x{})^T", m, k, n, k2)));
        }
        let data = kernels::matmul_nt(
            &self.nodes[a.id].value.data,
            &self.nodes[b.id].value.data,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMulNT { a, b }, rg))
    }

    // ── unary nonlinearities ────────────────────────────────────────

    pub fn exp(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.id].value.data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.id].value.data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Log(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.id]
            .value
            .data
            .iter()
            .map(|&v| kernels::gelu(v))
            .collect();
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Gelu(x), rg)
    }

    // ── row-wise normalizations ─────────────────────────────────────

    /// Softmax over the first `valid_cols` entries of each row; the rest of
    /// the row is exactly zero in the output and receives zero gradient.
    pub fn row_softmax_masked(&mut self, x: Var, valid_cols: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[x.id].value.rows_cols();
        if valid_cols == 0 || valid_cols > cols {
            return Err(CoreError::Contract(format!(
                "row_softmax: valid_cols {} out of 1..={}",
                valid_cols, cols
            )));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::softmax_masked(
                self.nodes[x.id].value.row(r),
                valid_cols,
                &mut data[r * cols..(r + 1) * cols],
            );
        }
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::RowSoftmax { x, valid_cols }, rg))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.nodes[x.id].value.rows_cols();
        self.row_softmax_masked(x, cols)
    }

    pub fn row_log_softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = self.nodes[x.id].value.rows_cols();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::log_softmax_row(
                self.nodes[x.id].value.row(r),
                &mut data[r * cols..(r + 1) * cols],
            );
        }
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::RowLogSoftmax { x }, rg)
    }

    /// Per-row zero-mean unit-variance normalization followed by an affine
    /// map: `gain ⊙ x̂ + bias`, with population variance and an eps guard.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(CoreError::Contract("layer_norm: eps must be > 0".into()));
        }
        let (rows, cols) = self.nodes[x.id].value.rows_cols();
        if self.nodes[gain.id].value.numel() != cols || self.nodes[bias.id].value.numel() != cols {
            return Err(CoreError::shape("layer_norm", "gain/bias length != columns"));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = self.nodes[x.id].value.row(r);
            let (mean, inv) = layer_norm_stats(row, eps);
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv;
                data[r * cols + c] =
                    self.nodes[gain.id].value.data[c] * xhat + self.nodes[bias.id].value.data[c];
            }
        }
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    // ── time-axis ops ───────────────────────────────────────────────

    /// Same-length 1-D convolution along the row (time) axis.
    /// `x`: T×d_in, `kernel`: C×d_in×w with odd w, `bias`: C. Output T×C.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (t, d_in) = self.nodes[x.id].value.dims2("conv1d_same")?;
        let kshape = self.nodes[kernel.id].value.shape.clone();
        if kshape.len() != 3 {
            return Err(CoreError::shape("conv1d_same", "kernel must be C×d_in×w"));
        }
        let (c_out, kd, w) = (kshape[0], kshape[1], kshape[2]);
        if kd != d_in {
            return Err(CoreError::shape(
                "conv1d_same",
                format!("kernel expects {} input channels, got {}", kd, d_in),
            ));
        }
        if w % 2 == 0 {
            return Err(CoreError::Config(format!(
                "conv1d_same: kernel width must be odd, got {}",
                w
            )));
        }
        if self.nodes[bias.id].value.numel() != c_out {
            return Err(CoreError::shape("conv1d_same", "bias length != output channels"));
        }
        let half = (w - 1) / 2;
        let xv = &self.nodes[x.id].value.data;
        let kv = &self.nodes[kernel.id].value.data;
        let bv = &self.nodes[bias.id].value.data;
        let mut data = vec![0.0; t * c_out];
        for ti in 0..t {
            for c in 0..c_out {
                let mut acc = bv[c];
                for dt in 0..w {
                    let src = ti as isize + dt as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for i in 0..d_in {
                        acc += xv[src * d_in + i] * kv[(c * d_in + i) * w + dt];
                    }
                }
                data[ti * c_out + c] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor { shape: vec![t, c_out], data },
            Op::Conv1dSame { x, kernel, bias },
            rg,
        ))
    }

    /// Pool T×C rows down to exactly `out_len` rows by averaging bins
    /// `[floor(i·T/P), ceil((i+1)·T/P))`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let (t, c) = self.nodes[x.id].value.dims2("adaptive_avg_pool1d")?;
        if t == 0 || out_len == 0 {
            return Err(CoreError::Contract("adaptive_avg_pool1d: empty input or output".into()));
        }
        let xv = &self.nodes[x.id].value.data;
        let mut data = vec![0.0; out_len * c];
        for i in 0..out_len {
            let (s, e) = kernels::pool_bin(i, t, out_len);
            let span = (e - s) as f64;
            for col in 0..c {
                let mut acc = 0.0;
                for r in s..e {
                    acc += xv[r * c + col];
                }
                data[i * c + col] = acc / span;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: vec![out_len, c], data },
            Op::AdaptiveAvgPool { x },
            rg,
        ))
    }

    // ── slicing, concatenation, reductions ──────────────────────────

    pub fn take_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[x.id].value.dims2("take_rows")?;
        if start + len > rows || len == 0 {
            return Err(CoreError::shape(
                "take_rows",
                format!("rows {}..{} of {}", start, start + len, rows),
            ));
        }
        let data = self.nodes[x.id].value.data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![len, cols], data }, Op::TakeRows { x, start }, rg))
    }

    pub fn take_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[x.id].value.dims2("take_cols")?;
        if start + len > cols || len == 0 {
            return Err(CoreError::shape(
                "take_cols",
                format!("cols {}..{} of {}", start, start + len, cols),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[x.id].value.data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![rows, len], data }, Op::TakeCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_cols: no parts".into()));
        }
        let (rows, _) = self.nodes[parts[0].id].value.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.nodes[p.id].value.dims2("concat_cols")?;
            if r != rows {
                return Err(CoreError::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.id].value.data[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { shape: vec![rows, total], data },
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Mean over the first `rows` rows; output shape 1×C.
    pub fn mean_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r_all, cols) = self.nodes[x.id].value.dims2("mean_rows")?;
        if rows == 0 || rows > r_all {
            return Err(CoreError::Contract(format!(
                "mean_rows: {} rows requested of {}",
                rows, r_all
            )));
        }
        let xv = &self.nodes[x.id].value.data;
        let mut data = vec![0.0; cols];
        for row in xv.chunks(cols).take(rows) {
            for (acc, &v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in data.iter_mut() {
            *v /= rows as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![1, cols], data }, Op::MeanRows { x, rows }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.id].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.id].value.numel() as f64;
        let total: f64 = self.nodes[x.id].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total / n), Op::Mean(x), rg)
    }

    /// Extract one element (by flat index) as a scalar node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        if index >= self.nodes[x.id].value.numel() {
            return Err(CoreError::Contract(format!(
                "pick: index {} out of {}",
                index,
                self.nodes[x.id].value.numel()
            )));
        }
        let v = self.nodes[x.id].value.data[index];
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.id].value.numel() {
            return Err(CoreError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x.id].value.shape, shape),
            ));
        }
        let data = self.nodes[x.id].value.data.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { x }, rg))
    }

    // ── gating ops ──────────────────────────────────────────────────

    /// Binarize soft gate scores to a {0,1} mask keeping the k largest
    /// (ties to the lower index). Backward is straight-through: selected
    /// positions pass the incoming gradient to their soft score, unselected
    /// positions get exactly zero.
    pub fn topk_gates(&mut self, scores: Var, k: usize) -> Result<Var> {
        let n = self.nodes[scores.id].value.numel();
        if k == 0 || k > n {
            return Err(CoreError::Contract(format!("topk_gates: k {} out of 1..={}", k, n)));
        }
        let bits = gating::topk_mask(&self.nodes[scores.id].value.data, k);
        let data: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let shape = self.nodes[scores.id].value.shape.clone();
        let rg = self.rg(scores);
        Ok(self.push(Tensor { shape, data }, Op::TopK { scores }, rg))
    }

    /// Binarize by `score > gamma`; when nothing clears the threshold, the
    /// single argmax position is forced on.
    pub fn threshold_gates(&mut self, scores: Var, gamma: f64) -> Result<Var> {
        let bits = gating::threshold_mask(&self.nodes[scores.id].value.data, gamma);
        let data: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let shape = self.nodes[scores.id].value.shape.clone();
        let rg = self.rg(scores);
        Ok(self.push(Tensor { shape, data }, Op::Threshold { scores }, rg))
    }

    /// `x * gates[index]`: the literal per-layer gate multiplier of the
    /// dynamic encoder. Gradient to `gates[index]` is `Σ dout ⊙ x`.
    pub fn mul_gate(&mut self, x: Var, gates: Var, index: usize) -> Result<Var> {
        if index >= self.nodes[gates.id].value.numel() {
            return Err(CoreError::Contract(format!(
                "mul_gate: gate index {} out of {}",
                index,
                self.nodes[gates.id].value.numel()
            )));
        }
        let g = self.nodes[gates.id].value.data[index];
        let data: Vec<f64> = self.nodes[x.id].value.data.iter().map(|v| v * g).collect();
        let shape = self.nodes[x.id].value.shape.clone();
        let rg = self.rg(x) || self.rg(gates);
        Ok(self.push(Tensor { shape, data }, Op::MulGate { x, gates, index }, rg))
    }

    /// CTC negative log-likelihood of `targets` given per-frame log-probs
    /// (rows beyond `input_len` are ignored). Infeasible target lengths give
    /// a +inf loss with zero gradient rather than an error.
    pub fn ctc(&mut self, log_probs: Var, targets: &[usize], input_len: usize) -> Result<Var> {
        let (t, v) = self.nodes[log_probs.id].value.dims2("ctc_loss")?;
        if input_len == 0 || input_len > t {
            return Err(CoreError::Contract(format!(
                "ctc_loss: input_len {} out of 1..={}",
                input_len, t
            )));
        }
        for &label in targets {
            if label == 0 || label >= v {
                return Err(CoreError::Contract(format!(
                    "ctc_loss: label {} outside 1..{}",
                    label, v
                )));
            }
        }
        let nll = loss::ctc_forward(&self.nodes[log_probs.id].value, targets, input_len);
        let rg = self.rg(log_probs);
        Ok(self.push(
            Tensor::scalar(nll),
            Op::Ctc {
                log_probs,
                targets: targets.to_vec(),
                input_len,
            },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    fn acc(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.id];
        if !node.requires_grad {
            return;
        }
        let numel = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![0.0; numel]);
        for (gv, dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates the gradient of
    /// every `requires_grad` node reachable from `loss`; query results with
    /// [`Tape::grad`]. One sweep per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(CoreError::Contract(
                "backward already ran on this tape; build a fresh graph".into(),
            ));
        }
        if !self.nodes[loss.id].value.is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.id].value.shape
            )));
        }
        self.backward_done = true;
        // Name the op that first produced a NaN, not a downstream consumer.
        for node in &self.nodes[..=loss.id] {
            if node.value.data.iter().any(|v| v.is_nan()) {
                return Err(CoreError::Numeric { op: op_name(&node.op) });
            }
        }
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.nodes[loss.id].grad = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let g = self.nodes[id].grad.clone().unwrap();
            if g.iter().any(|v| v.is_nan()) {
                return Err(CoreError::Numeric { op: op_name(&op) });
            }
            self.dispatch(id, &op, &g)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, id: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b.id].value.data)
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.id].value.data)
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::AddRow { x, row } => {
                self.acc(x, g);
                let (rows, cols) = self.nodes[x.id].value.rows_cols();
                let mut drow = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        drow[c] += g[r * cols + c];
                    }
                }
                self.acc(row, &drow);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.acc(x, &dx);
            }
            Op::AddConst { x } => self.acc(x, g),
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.id].value.dims2("matmul")?;
                let n = self.nodes[b.id].value.shape[1];
                // dA = dC @ B^T, dB = A^T @ dC
                let da = kernels::matmul_nt(g, &self.nodes[b.id].value.data, m, n, k);
                self.acc(a, &da);
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn_acc(&self.nodes[a.id].value.data, g, &mut db, m, k, n);
                self.acc(b, &db);
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = self.nodes[a.id].value.dims2("matmul_nt")?;
                let n = self.nodes[b.id].value.shape[0];
                // C = A @ B^T: dA = dC @ B, dB = dC^T @ A
                let da = kernels::matmul_nn(g, &self.nodes[b.id].value.data, m, n, k);
                self.acc(a, &da);
                let mut db = vec![0.0; n * k];
                kernels::matmul_tn_acc(g, &self.nodes[a.id].value.data, &mut db, m, n, k);
                self.acc(b, &db);
            }
            Op::Exp(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(gv, yv)| gv * yv)
                    .collect();
                self.acc(x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.id].value.data)
                    .map(|(gv, xv)| gv / xv)
                    .collect();
                self.acc(x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.id].value.data)
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                self.acc(x, &dx);
            }
            Op::RowSoftmax { x, valid_cols } => {
                let (rows, cols) = self.nodes[x.id].value.rows_cols();
                let y = &self.nodes[id].value.data;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr[..valid_cols]
                        .iter()
                        .zip(&gr[..valid_cols])
                        .map(|(s, gv)| s * gv)
                        .sum();
                    for c in 0..valid_cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(x, &dx);
            }
            Op::RowLogSoftmax { x } => {
                let (rows, cols) = self.nodes[x.id].value.rows_cols();
                let y = &self.nodes[id].value.data;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.acc(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, cols) = self.nodes[x.id].value.rows_cols();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = self.nodes[x.id].value.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mean, inv) = layer_norm_stats(row, eps);
                    let gainv = &self.nodes[gain.id].value.data;
                    let mut dxhat = vec![0.0; cols];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        dgain[c] += gr[c] * xhat;
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * gainv[c];
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat;
                    }
                    let d = cols as f64;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        dx[r * cols + c] =
                            inv * (dxhat[c] - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                    }
                }
                self.acc(x, &dx);
                self.acc(gain, &dgain);
                self.acc(bias, &dbias);
            }
            Op::Conv1dSame { x, kernel, bias } => {
                let (t, d_in) = self.nodes[x.id].value.dims2("conv1d_same")?;
                let kshape = &self.nodes[kernel.id].value.shape;
                let (c_out, w) = (kshape[0], kshape[2]);
                let half = (w - 1) / 2;
                let xv = &self.nodes[x.id].value.data;
                let kv = &self.nodes[kernel.id].value.data;
                let mut dx = vec![0.0; t * d_in];
                let mut dk = vec![0.0; c_out * d_in * w];
                let mut db = vec![0.0; c_out];
                for ti in 0..t {
                    for c in 0..c_out {
                        let gv = g[ti * c_out + c];
                        if gv == 0.0 {
                            continue;
                        }
                        db[c] += gv;
                        for dt in 0..w {
                            let src = ti as isize + dt as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for i in 0..d_in {
                                dx[src * d_in + i] += gv * kv[(c * d_in + i) * w + dt];
                                dk[(c * d_in + i) * w + dt] += gv * xv[src * d_in + i];
                            }
                        }
                    }
                }
                self.acc(x, &dx);
                self.acc(kernel, &dk);
                self.acc(bias, &db);
            }
            Op::AdaptiveAvgPool { x } => {
                let (t, c) = self.nodes[x.id].value.dims2("adaptive_avg_pool1d")?;
                let out_len = self.nodes[id].value.shape[0];
                let mut dx = vec![0.0; t * c];
                for i in 0..out_len {
                    let (s, e) = kernels::pool_bin(i, t, out_len);
                    let span = (e - s) as f64;
                    for col in 0..c {
                        let gv = g[i * c + col] / span;
                        for r in s..e {
                            dx[r * c + col] += gv;
                        }
                    }
                }
                self.acc(x, &dx);
            }
            Op::TakeRows { x, start } => {
                let (_, cols) = self.nodes[x.id].value.dims2("take_rows")?;
                let numel = self.nodes[x.id].value.numel();
                let mut dx = vec![0.0; numel];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.acc(x, &dx);
            }
            Op::TakeCols { x, start } => {
                let (rows, cols) = self.nodes[x.id].value.dims2("take_cols")?;
                let len = self.nodes[id].value.shape[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..len {
                        dx[r * cols + start + c] = g[r * len + c];
                    }
                }
                self.acc(x, &dx);
            }
            Op::ConcatCols { ref parts } => {
                let rows = self.nodes[id].value.shape[0];
                let total = self.nodes[id].value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.id].value.shape[1];
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.acc(p, &dp);
                    offset += w;
                }
            }
            Op::MeanRows { x, rows } => {
                let (r_all, cols) = self.nodes[x.id].value.dims2("mean_rows")?;
                let mut dx = vec![0.0; r_all * cols];
                let scale = 1.0 / rows as f64;
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c] * scale;
                    }
                }
                self.acc(x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x.id].value.numel()];
                self.acc(x, &dx);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.id].value.numel();
                let dx = vec![g[0] / n as f64; n];
                self.acc(x, &dx);
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; self.nodes[x.id].value.numel()];
                dx[index] = g[0];
                self.acc(x, &dx);
            }
            Op::Reshape { x } => self.acc(x, g),
            Op::TopK { scores } | Op::Threshold { scores } => {
                // Straight-through: pass gradient where the bit is set.
                let bits = &self.nodes[id].value.data;
                let ds: Vec<f64> = g.iter().zip(bits).map(|(gv, b)| gv * b).collect();
                self.acc(scores, &ds);
            }
            Op::MulGate { x, gates, index } => {
                let gv = self.nodes[gates.id].value.data[index];
                let dx: Vec<f64> = g.iter().map(|v| v * gv).collect();
                self.acc(x, &dx);
                let dgate: f64 = g
                    .iter()
                    .zip(&self.nodes[x.id].value.data)
                    .map(|(gv, xv)| gv * xv)
                    .sum();
                let mut dg = vec![0.0; self.nodes[gates.id].value.numel()];
                dg[index] = dgate;
                self.acc(gates, &dg);
            }
            Op::Ctc { log_probs, ref targets, input_len } => {
                let grad = loss::ctc_grad(&self.nodes[log_probs.id].value, targets, input_len);
                let dx: Vec<f64> = grad.iter().map(|v| v * g[0]).collect();
                self.acc(log_probs, &dx);
            }
        }
        Ok(())
    }
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Compare the analytic gradient of a scalar-valued graph function against
/// central finite differences at `x0`. Returns the max over coordinates of
/// `|analytic − fd| / max(1e-12, |fd|)`.
pub fn finite_diff_check<F>(mut f: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(CoreError::Contract("finite_diff_check: eps must be > 0".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_scalar() {
        return Err(CoreError::Contract(
            "finite_diff_check: f must produce a scalar".into(),
        ));
    }
    if tape.value(y).data[0].is_nan() {
        return Err(CoreError::Numeric { op: "finite_diff_check" });
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(|t| t.data)
        .unwrap_or_else(|| vec![0.0; x0.numel()]);

    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(
            Tensor {
                shape: x0.shape.clone(),
                data,
            },
            false,
        );
        let out = f(&mut t, xv)?;
        let v = t.value(out).item()?;
        if v.is_nan() {
            return Err(CoreError::Numeric { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..x0.numel() {
        let mut plus = x0.data.clone();
        plus[i] += eps;
        let mut minus = x0.data.clone();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
