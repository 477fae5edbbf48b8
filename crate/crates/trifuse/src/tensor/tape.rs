//! Define-by-run reverse-mode tape.
//!
//! A fresh [`Tape`] is built for every forward pass; nodes hold the op that
//! produced them plus its value, and `backward` walks the node list in
//! reverse, accumulating gradients. Every op validates its output for
//! finiteness so NaN/Inf cannot escape an op boundary silently.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Temporal convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output length equals the input length (odd kernels only).
    Same,
    /// No padding; output length is `L - k + 1`.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        padding: Padding,
    },
    Row(NodeId, usize),
    Plane(NodeId, usize),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    ColSlice {
        a: NodeId,
        start: usize,
        len: usize,
    },
    AppendOne(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dropout {
        a: NodeId,
        mask: Vec<f64>,
    },
    GroupedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        classes: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode tape. One tape per forward pass, one thread per tape.
pub struct Tape {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::seeded(0)
    }

    /// Tape with a seeded RNG; only dropout masks consume randomness.
    pub fn seeded(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Detach a node's value into a plain tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes hold validated values")
    }

    /// Insert a tensor as a leaf; gradient tracking follows `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Insert a tensor as a tracked parameter leaf.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Insert a tensor as an untracked constant.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        self.push_raw(shape, data, false, Op::Leaf)
    }

    fn push_raw(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, what: &str) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        let needs_grad = self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push_raw(shape, data, needs_grad, op))
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Softmax(a, _)
            | Op::Row(a, _)
            | Op::Plane(a, _)
            | Op::Reshape(a)
            | Op::ColSlice { a, .. }
            | Op::AppendOne(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Dropout { a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, kernel, .. } => vec![*x, *kernel],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::GroupedCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn expect_rank(&self, id: NodeId, rank: usize, what: &str) -> Result<()> {
        if self.nodes[id.0].shape.len() != rank {
            return Err(Error::ShapeMismatch(format!(
                "{what} expects rank-{rank} input, got shape {:?}",
                self.nodes[id.0].shape
            )));
        }
        Ok(())
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.expect_rank(a, 2, "matmul lhs")?;
        self.expect_rank(b, 2, "matmul rhs")?;
        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let (k2, n) = (self.nodes[b.0].shape[0], self.nodes[b.0].shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(vec![m, n], data, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.expect_rank(a, 2, "transpose")?;
        let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let data = transpose_raw(&self.nodes[a.0].data, r, c);
        self.push(vec![c, r], data, Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "{what} needs matching shapes, got {:?} and {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), "mul")
    }

    /// Broadcast a length-`d` row vector over every row of `[L,d]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.expect_rank(a, 2, "add_row matrix")?;
        self.expect_rank(row, 1, "add_row vector")?;
        let (l, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if self.nodes[row.0].shape[0] != d {
            return Err(Error::ShapeMismatch(format!(
                "add_row: matrix cols {d} vs vector len {}",
                self.nodes[row.0].shape[0]
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..l {
            for j in 0..d {
                data[i * d + j] += self.nodes[row.0].data[j];
            }
        }
        self.push(vec![l, d], data, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Tanh(a), "tanh")
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0].data.iter().map(|x| x.abs()).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Abs(a), "abs")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let data = softmax_raw(&self.nodes[a.0].data, &shape, axis);
        self.push(shape, data, Op::Softmax(a, axis), "softmax")
    }

    /// Per-row normalization over the last axis, then affine by gamma/beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| {
            Error::ShapeMismatch("layer_norm needs at least rank-1 input".into())
        })?;
        self.expect_rank(gamma, 1, "layer_norm gamma")?;
        self.expect_rank(beta, 1, "layer_norm beta")?;
        if self.nodes[gamma.0].shape[0] != d || self.nodes[beta.0].shape[0] != d {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm: feature dim {d} vs gamma {:?} / beta {:?}",
                self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        if d == 0 {
            return Err(Error::ShapeMismatch("layer_norm over empty features".into()));
        }
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let s = &xd[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (s[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push(shape, out, Op::LayerNorm { x, gamma, beta, eps }, "layer_norm")
    }

    /// Temporal cross-correlation of `[L,d_in]` with a `[k,d_in,d_out]` kernel.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        self.expect_rank(x, 2, "conv1d input")?;
        self.expect_rank(kernel, 3, "conv1d kernel")?;
        let (l, d_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let ks = self.nodes[kernel.0].shape.clone();
        let (k, kd_in, d_out) = (ks[0], ks[1], ks[2]);
        if kd_in != d_in {
            return Err(Error::ShapeMismatch(format!(
                "conv1d: input features {d_in} vs kernel {kd_in}"
            )));
        }
        if k == 0 {
            return Err(Error::ShapeMismatch("conv1d: empty kernel".into()));
        }
        let out_len = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::EvenKernelWithSamePadding(k));
                }
                l
            }
            Padding::Valid => {
                if l < k {
                    return Err(Error::ShapeMismatch(format!(
                        "conv1d valid padding: sequence length {l} < kernel width {k}"
                    )));
                }
                l - k + 1
            }
        };
        let off = match padding {
            Padding::Same => (k / 2) as isize,
            Padding::Valid => 0,
        };
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernel.0].data;
        let mut out = vec![0.0; out_len * d_out];
        for t in 0..out_len {
            for j in 0..k {
                let src = t as isize + j as isize - off;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let xrow = &xd[src as usize * d_in..(src as usize + 1) * d_in];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kd[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                    let orow = &mut out[t * d_out..(t + 1) * d_out];
                    for o in 0..d_out {
                        orow[o] += xv * krow[o];
                    }
                }
            }
        }
        self.push(
            vec![out_len, d_out],
            out,
            Op::Conv1d { x, kernel, padding },
            "conv1d",
        )
    }

    /// Select row `i` of `[L,d]` as a `[1,d]` matrix.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.expect_rank(a, 2, "row")?;
        let (l, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if i >= l {
            return Err(Error::ShapeMismatch(format!("row {i} out of {l}")));
        }
        let data = self.nodes[a.0].data[i * d..(i + 1) * d].to_vec();
        self.push(vec![1, d], data, Op::Row(a, i), "row")
    }

    /// Select slice `i` along axis 0 of a rank-3 tensor, yielding a matrix.
    pub fn plane(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.expect_rank(a, 3, "plane")?;
        let s = self.nodes[a.0].shape.clone();
        if i >= s[0] {
            return Err(Error::ShapeMismatch(format!("plane {i} out of {}", s[0])));
        }
        let sz = s[1] * s[2];
        let data = self.nodes[a.0].data[i * sz..(i + 1) * sz].to_vec();
        self.push(vec![s[1], s[2]], data, Op::Plane(a, i), "plane")
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        self.push(shape, data, Op::Reshape(a), "reshape")
    }

    /// Stack matrices with equal column counts along the time axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_rows of nothing".into()));
        }
        for &p in parts {
            self.expect_rank(p, 2, "concat_rows")?;
        }
        let d = self.nodes[parts[0].0].shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.nodes[p.0].shape[1] != d {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows: column counts differ ({} vs {})",
                    d, self.nodes[p.0].shape[1]
                )));
            }
            rows += self.nodes[p.0].shape[0];
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(vec![rows, d], data, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Concatenate matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_cols of nothing".into()));
        }
        for &p in parts {
            self.expect_rank(p, 2, "concat_cols")?;
        }
        let l = self.nodes[parts[0].0].shape[0];
        let total: usize = parts.iter().map(|p| self.nodes[p.0].shape[1]).sum();
        let mut data = vec![0.0; l * total];
        let mut col = 0;
        for &p in parts {
            let (pl, pd) = (self.nodes[p.0].shape[0], self.nodes[p.0].shape[1]);
            if pl != l {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols: row counts differ ({l} vs {pl})"
                )));
            }
            for r in 0..l {
                data[r * total + col..r * total + col + pd]
                    .copy_from_slice(&self.nodes[p.0].data[r * pd..(r + 1) * pd]);
            }
            col += pd;
        }
        self.push(vec![l, total], data, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Select a contiguous column range of `[L,d]`.
    pub fn col_slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.expect_rank(a, 2, "col_slice")?;
        let (l, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if start + len > d || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "col_slice {start}..{} out of {d}",
                start + len
            )));
        }
        let mut data = vec![0.0; l * len];
        for r in 0..l {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[a.0].data[r * d + start..r * d + start + len]);
        }
        self.push(
            vec![l, len],
            data,
            Op::ColSlice { a, start, len },
            "col_slice",
        )
    }

    /// Append a constant 1 to a vector: `[d] -> [d+1]`.
    pub fn append_one(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(Error::NonVectorInput(self.nodes[a.0].shape.clone()));
        }
        let mut data = self.nodes[a.0].data.clone();
        data.push(1.0);
        let d = data.len();
        self.push(vec![d], data, Op::AppendOne(a), "append_one")
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), "sum")
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(Error::ShapeMismatch("mean of empty tensor".into()));
        }
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], Op::Mean(a), "mean")
    }

    /// Inverted-scaling dropout; identity when `rate == 0` or not training.
    pub fn dropout(&mut self, a: NodeId, rate: f64, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRange(format!("dropout rate {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[a.0].data.len())
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Dropout { a, mask },
            "dropout",
        )
    }

    /// Summed cross-entropy over `targets.len()` independent softmax groups
    /// of `classes` logits each; `logits` is a flat vector.
    pub fn grouped_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        classes: usize,
    ) -> Result<NodeId> {
        self.expect_rank(logits, 1, "grouped_cross_entropy")?;
        let n = self.nodes[logits.0].shape[0];
        if n != targets.len() * classes {
            return Err(Error::ShapeMismatch(format!(
                "grouped_cross_entropy: {} logits vs {} groups x {} classes",
                n,
                targets.len(),
                classes
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidRange(format!(
                "target class {t} out of {classes}"
            )));
        }
        let ld = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for (g, &t) in targets.iter().enumerate() {
            let row = &ld[g * classes..(g + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        self.push(
            vec![1],
            vec![loss],
            Op::GroupedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                classes,
            },
            "grouped_cross_entropy",
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-accumulate gradients from a scalar loss into every tracked
    /// leaf reachable from it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::DetachedTensor);
        }
        for node in &mut self.nodes {
            node.grad = if node.needs_grad {
                Some(vec![0.0; node.data.len()])
            } else {
                None
            };
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].needs_grad {
                        let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = transpose_raw(&self.nodes[a.0].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let da = transpose_raw(&grad, r, c);
                    self.accumulate(a, &da);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(g, y)| g * y)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(g, x)| g * x)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::AddRow(a, row) => {
                    self.accumulate(a, &grad);
                    if self.nodes[row.0].needs_grad {
                        let d = self.nodes[row.0].shape[0];
                        let mut dr = vec![0.0; d];
                        for (idx, g) in grad.iter().enumerate() {
                            dr[idx % d] += g;
                        }
                        self.accumulate(row, &dr);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = grad.iter().map(|g| c * g).collect();
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, &t)| g * (1.0 - t * t))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Abs(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Softmax(a, axis) => {
                    let shape = &self.nodes[i].shape;
                    let axis_size = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let out = &self.nodes[i].data;
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        for inn in 0..inner {
                            let mut dot = 0.0;
                            for x in 0..axis_size {
                                let f = o * axis_size * inner + x * inner + inn;
                                dot += grad[f] * out[f];
                            }
                            for x in 0..axis_size {
                                let f = o * axis_size * inner + x * inner + inn;
                                da[f] = out[f] * (grad[f] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let xd = self.nodes[x.0].data.clone();
                    let gd = self.nodes[gamma.0].data.clone();
                    let rows = xd.len() / d;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let xs = &xd[r * d..(r + 1) * d];
                        let gs = &grad[r * d..(r + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += gs[j] * xhat[j];
                            dbeta[j] += gs[j];
                            dxhat[j] = gs[j] * gd[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Conv1d { x, kernel, padding } => {
                    let (l, d_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let ks = self.nodes[kernel.0].shape.clone();
                    let (k, d_out) = (ks[0], ks[2]);
                    let out_len = self.nodes[i].shape[0];
                    let off = match padding {
                        Padding::Same => (k / 2) as isize,
                        Padding::Valid => 0,
                    };
                    let xd = self.nodes[x.0].data.clone();
                    let kd = self.nodes[kernel.0].data.clone();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dk = vec![0.0; kd.len()];
                    for t in 0..out_len {
                        let go = &grad[t * d_out..(t + 1) * d_out];
                        for j in 0..k {
                            let src = t as isize + j as isize - off;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let src = src as usize;
                            for i_in in 0..d_in {
                                let xv = xd[src * d_in + i_in];
                                let kbase = (j * d_in + i_in) * d_out;
                                let mut acc = 0.0;
                                for o in 0..d_out {
                                    acc += go[o] * kd[kbase + o];
                                    dk[kbase + o] += go[o] * xv;
                                }
                                dx[src * d_in + i_in] += acc;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(kernel, &dk);
                }
                Op::Row(a, r) => {
                    if self.nodes[a.0].needs_grad {
                        let d = self.nodes[a.0].shape[1];
                        let mut da = vec![0.0; self.nodes[a.0].data.len()];
                        da[r * d..(r + 1) * d].copy_from_slice(&grad);
                        self.accumulate(a, &da);
                    }
                }
                Op::Plane(a, p) => {
                    if self.nodes[a.0].needs_grad {
                        let sz = self.nodes[a.0].shape[1] * self.nodes[a.0].shape[2];
                        let mut da = vec![0.0; self.nodes[a.0].data.len()];
                        da[p * sz..(p + 1) * sz].copy_from_slice(&grad);
                        self.accumulate(a, &da);
                    }
                }
                Op::Reshape(a) => {
                    self.accumulate(a, &grad);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].data.len();
                        let slice = grad[offset..offset + n].to_vec();
                        self.accumulate(p, &slice);
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = self.nodes[i].shape[1];
                    let l = self.nodes[i].shape[0];
                    let mut col = 0;
                    for p in parts {
                        let pd = self.nodes[p.0].shape[1];
                        if self.nodes[p.0].needs_grad {
                            let mut dp = vec![0.0; l * pd];
                            for r in 0..l {
                                dp[r * pd..(r + 1) * pd]
                                    .copy_from_slice(&grad[r * total + col..r * total + col + pd]);
                            }
                            self.accumulate(p, &dp);
                        }
                        col += pd;
                    }
                }
                Op::ColSlice { a, start, len } => {
                    if self.nodes[a.0].needs_grad {
                        let (l, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let mut da = vec![0.0; l * d];
                        for r in 0..l {
                            da[r * d + start..r * d + start + len]
                                .copy_from_slice(&grad[r * len..(r + 1) * len]);
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::AppendOne(a) => {
                    let d = self.nodes[a.0].shape[0];
                    self.accumulate(a, &grad[..d]);
                }
                Op::Sum(a) => {
                    let da = vec![grad[0]; self.nodes[a.0].data.len()];
                    self.accumulate(a, &da);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.len();
                    let da = vec![grad[0] / n as f64; n];
                    self.accumulate(a, &da);
                }
                Op::Dropout { a, mask } => {
                    let da: Vec<f64> = grad.iter().zip(&mask).map(|(g, m)| g * m).collect();
                    self.accumulate(a, &da);
                }
                Op::GroupedCrossEntropy {
                    logits,
                    targets,
                    classes,
                } => {
                    if self.nodes[logits.0].needs_grad {
                        let ld = &self.nodes[logits.0].data;
                        let mut dl = vec![0.0; ld.len()];
                        for (g, &t) in targets.iter().enumerate() {
                            let row = &ld[g * classes..(g + 1) * classes];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                            let z: f64 = exps.iter().sum();
                            for c in 0..classes {
                                let soft = exps[c] / z;
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                dl[g * classes + c] = grad[0] * (soft - onehot);
                            }
                        }
                        self.accumulate(logits, &dl);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, grad: &[f64]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (a, b) in g.iter_mut().zip(grad) {
                *a += b;
            }
        }
    }
}

/// Records `(name, node)` pairs as parameters are bound onto a tape so
/// gradients can be routed back into a named registry after `backward`.
#[derive(Debug, Default)]
pub struct Binder {
    pub entries: Vec<(String, NodeId)>,
}

impl Binder {
    pub fn new() -> Self {
        Binder::default()
    }

    pub fn leaf(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> NodeId {
        let id = tape.param(t);
        self.entries.push((name, id));
        id
    }
}

fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for x in 0..axis_size {
                mx = mx.max(data[o * axis_size * inner + x * inner + inn]);
            }
            let mut z = 0.0;
            for x in 0..axis_size {
                let f = o * axis_size * inner + x * inner + inn;
                let e = (data[f] - mx).exp();
                out[f] = e;
                z += e;
            }
            for x in 0..axis_size {
                out[o * axis_size * inner + x * inner + inn] /= z;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check_fn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = vec![
            Tensor::normal(vec![3, 4], 1.0, &mut rng).with_grad(),
            Tensor::normal(vec![4, 2], 1.0, &mut rng).with_grad(),
        ];
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let c = tape.matmul(ids[0], ids[1])?;
                tape.sum(c)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let third = 1.0 / 3.0;
        assert!(close(tape.value(s), &[third, third, third], 1e-15));

        let big = tape.constant(Tensor::vector(vec![1000.0, 1000.0]).unwrap());
        let s2 = tape.softmax(big, 0).unwrap();
        assert!(close(tape.value(s2), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = Tensor::normal(vec![4, 5], 2.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(t.clone());
            let s = tape.softmax(x, 1).unwrap();
            for r in 0..4 {
                let row_sum: f64 = tape.value(s)[r * 5..(r + 1) * 5].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
            let shifted =
                Tensor::new(vec![4, 5], t.data().iter().map(|v| v + 7.25).collect()).unwrap();
            let xs = tape.constant(shifted);
            let s2 = tape.softmax(xs, 1).unwrap();
            let (a, b) = (tape.value(s).to_vec(), tape.value(s2).to_vec());
            assert!(close(&a, &b, 1e-10));
        }
    }

    #[test]
    fn softmax_leading_axis_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = vec![Tensor::normal(vec![4, 3], 1.0, &mut rng).with_grad()];
        let weights = Tensor::normal(vec![4, 3], 1.0, &mut rng);
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let s = tape.softmax(ids[0], 0)?;
                let w = tape.constant(weights.clone());
                let p = tape.mul(s, w)?;
                tape.sum(p)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        // columns along axis 0 are probability vectors
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::normal(vec![4, 3], 2.0, &mut rng));
        let s = tape.softmax(x, 0).unwrap();
        for c in 0..3 {
            let col: f64 = (0..4).map(|r| tape.value(s)[r * 3 + c]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.softmax(x, 2),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = vec![Tensor::normal(vec![3, 4], 1.0, &mut rng).with_grad()];
        let weights = Tensor::normal(vec![3, 4], 1.0, &mut rng);
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let s = tape.softmax(ids[0], 1)?;
                let w = tape.constant(weights.clone());
                let p = tape.mul(s, w)?;
                tape.sum(p)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_constant_row_and_gamma_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![5.0; 4]).unwrap());
        let gamma = tape.constant(Tensor::vector(vec![1.0; 4]).unwrap());
        let beta = tape.constant(Tensor::vector(vec![0.0; 4]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(close(tape.value(y), &[0.0; 4], 1e-12));

        let g0 = tape.constant(Tensor::vector(vec![0.0; 4]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x2 = tape.constant(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.0]).unwrap());
        let y2 = tape.layer_norm(x2, g0, b, 1e-5).unwrap();
        assert!(close(tape.value(y2), &[1.0, 2.0, 3.0, 4.0], 1e-15));
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::normal(vec![1, 64], 3.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let gamma = tape.constant(Tensor::vector(vec![1.0; 64]).unwrap());
        let beta = tape.constant(Tensor::vector(vec![0.0; 64]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 0.0).unwrap();
        let out = tape.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 64.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = vec![
            Tensor::normal(vec![3, 5], 1.0, &mut rng).with_grad(),
            Tensor::normal(vec![5], 0.5, &mut rng).with_grad(),
            Tensor::normal(vec![5], 0.5, &mut rng).with_grad(),
        ];
        let weights = Tensor::normal(vec![3, 5], 1.0, &mut rng);
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let w = tape.constant(weights.clone());
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv1d_pointwise_identity_and_center_delta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        // k=1 identity kernel
        let eye = tape.constant(Tensor::new(vec![1, 2, 2], vec![1., 0., 0., 1.]).unwrap());
        let y = tape.conv1d(x, eye, Padding::Same).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        // k=3 delta-at-center kernel equals a plain projection
        let proj = vec![0.5, -1.0, 2.0, 0.25];
        let mut kd = vec![0.0; 3 * 2 * 2];
        let center = |i: usize| (2 + i) * 2; // kernel slot (j=1, i, :)
        kd[center(0)..center(0) + 2].copy_from_slice(&proj[0..2]);
        kd[center(1)..center(1) + 2].copy_from_slice(&proj[2..4]);
        let k3 = tape.constant(Tensor::new(vec![3, 2, 2], kd).unwrap());
        let y3 = tape.conv1d(x, k3, Padding::Same).unwrap();
        let w = tape.constant(Tensor::matrix(2, 2, proj).unwrap());
        let direct = tape.matmul(x, w).unwrap();
        assert!(close(tape.value(y3), tape.value(direct), 1e-14));
    }

    #[test]
    fn conv1d_even_kernel_same_padding_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![4, 2]));
        let k = tape.constant(Tensor::zeros(vec![2, 2, 3]));
        assert!(matches!(
            tape.conv1d(x, k, Padding::Same),
            Err(Error::EvenKernelWithSamePadding(2))
        ));
        // valid padding accepts even kernels
        assert!(tape.conv1d(x, k, Padding::Valid).is_ok());
    }

    #[test]
    fn conv1d_valid_output_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![5, 2]));
        let k = tape.constant(Tensor::zeros(vec![3, 2, 4]));
        let y = tape.conv1d(x, k, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
        let short = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(tape.conv1d(short, k, Padding::Valid).is_err());
    }

    #[test]
    fn conv1d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            Tensor::normal(vec![5, 3], 1.0, &mut rng).with_grad(),
            Tensor::normal(vec![3, 3, 2], 1.0, &mut rng).with_grad(),
        ];
        for padding in [Padding::Same, Padding::Valid] {
            let report = fd_check_fn(
                &mut params.clone(),
                &mut |tape, ids| {
                    let y = tape.conv1d(ids[0], ids[1], padding)?;
                    tape.sum(y)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_is_2x() {
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let s = tape.sum(xid).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let sq = tape.mul(xid, xid).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        assert!(matches!(
            tape.backward(xid),
            Err(Error::NonScalarLoss(_))
        ));

        let c = tape.constant(Tensor::scalar(4.0).unwrap());
        assert!(matches!(tape.backward(c), Err(Error::DetachedTensor)));
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1e308]).unwrap());
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn append_one_cases() {
        let mut tape = Tape::new();
        let empty = tape.constant(Tensor::vector(vec![]).unwrap());
        let e1 = tape.append_one(empty).unwrap();
        assert_eq!(tape.value(e1), &[1.0]);

        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let v1 = tape.append_one(v).unwrap();
        assert_eq!(tape.value(v1), &[1.0, 2.0, 1.0]);

        let z = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        let z1 = tape.append_one(z).unwrap();
        assert_eq!(tape.value(z1), &[0.0, 0.0, 0.0, 1.0]);

        let m = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.append_one(m),
            Err(Error::NonVectorInput(_))
        ));
    }

    #[test]
    fn structural_ops_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = vec![
            Tensor::normal(vec![3, 4], 1.0, &mut rng).with_grad(),
            Tensor::normal(vec![2, 3, 4], 1.0, &mut rng).with_grad(),
            Tensor::normal(vec![4], 1.0, &mut rng).with_grad(),
        ];
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let r = tape.row(ids[0], 1)?;
                let p = tape.plane(ids[1], 0)?;
                let pt = tape.transpose(p)?;
                let prod = tape.matmul(r, pt)?; // [1,3]
                let reshaped = tape.reshape(prod, vec![3])?;
                let app = tape.append_one(reshaped)?; // [4]
                let biased = tape.reshape(app, vec![1, 4])?;
                let with_row = tape.add_row(biased, ids[2])?;
                let cat = tape.concat_cols(&[with_row, biased])?; // [1,8]
                let sl = tape.col_slice(cat, 2, 5)?;
                let stacked = tape.concat_rows(&[sl, sl])?;
                let ab = tape.abs(stacked)?;
                tape.mean(ab)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn activation_backwards_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = vec![Tensor::normal(vec![6], 1.0, &mut rng).with_grad()];
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let s = tape.sigmoid(ids[0])?;
                let t = tape.tanh(s)?;
                let r = tape.relu(t)?;
                let sc = tape.scale(r, 1.7)?;
                tape.sum(sc)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grouped_cross_entropy_value_and_gradient() {
        // two groups of two classes, hand-checked values
        let logits = Tensor::vector(vec![2.0, 0.0, -1.0, 1.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let loss = tape.grouped_cross_entropy(l, &[0, 1], 2).unwrap();
        let expected = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln()
            - (1.0f64.exp() / ((-1.0f64).exp() + 1.0f64.exp())).ln();
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);

        let mut params = vec![logits];
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| tape.grouped_cross_entropy(ids[0], &[0, 1], 2),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn dropout_is_identity_when_off_and_scales_when_on() {
        let x = Tensor::vector(vec![1.0; 1000]).unwrap();
        let mut tape = Tape::seeded(42);
        let xid = tape.constant(x);
        let off = tape.dropout(xid, 0.0, true).unwrap();
        assert_eq!(off, xid);
        let eval = tape.dropout(xid, 0.5, false).unwrap();
        assert_eq!(eval, xid);

        let on = tape.dropout(xid, 0.5, true).unwrap();
        let vals = tape.value(on);
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.15, "inverted scaling keeps mean ~1");
    }

    #[test]
    fn dropout_masks_are_seed_deterministic() {
        let x = Tensor::vector(vec![1.0; 64]).unwrap();
        let run = |seed| {
            let mut tape = Tape::seeded(seed);
            let xid = tape.constant(x.clone());
            let d = tape.dropout(xid, 0.3, true).unwrap();
            tape.value(d).to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}
