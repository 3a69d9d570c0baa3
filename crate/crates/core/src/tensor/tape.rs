//! Wengert tape: every op appends one node holding its output value and the
//! handles of its inputs. `backward` walks the nodes once in reverse order.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op discriminant, used for diagnostics and backward fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Exp,
    Sigmoid,
    Silu,
    Gelu,
    SoftmaxRows,
    RmsNorm,
    Dropout,
    CrossEntropy,
    Sum,
    AddRowBias,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    GatherRows,
    MeanRows,
    GatedFuse,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Exp => "exp",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Gelu => "gelu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::RmsNorm => "rmsnorm",
            OpKind::Dropout => "dropout",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::MeanRows => "mean_rows",
            OpKind::GatedFuse => "gated_fuse",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        const ALL: [OpKind; 26] = [
            OpKind::Leaf,
            OpKind::MatMul,
            OpKind::MatMulNt,
            OpKind::Transpose,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::AddScalar,
            OpKind::Exp,
            OpKind::Sigmoid,
            OpKind::Silu,
            OpKind::Gelu,
            OpKind::SoftmaxRows,
            OpKind::RmsNorm,
            OpKind::Dropout,
            OpKind::CrossEntropy,
            OpKind::Sum,
            OpKind::AddRowBias,
            OpKind::SliceCols,
            OpKind::ConcatCols,
            OpKind::SliceRows,
            OpKind::ConcatRows,
            OpKind::GatherRows,
            OpKind::MeanRows,
            OpKind::GatedFuse,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    AddRowBias(Var, Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, index: Vec<usize> },
    MeanRows(Var),
    GatedFuse { plus: Var, minus: Var, gate: Var, col: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Exp(_) => OpKind::Exp,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Silu(_) => OpKind::Silu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::GatedFuse { .. } => OpKind::GatedFuse,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Sigmoid(x)
            | Op::Silu(x)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::Sum(x)
            | Op::MeanRows(x) => vec![*x],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Dropout { x, .. } | Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::GatedFuse {
                plus, minus, gate, ..
            } => vec![*plus, *minus, *gate],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a differentiable computation. Single writer; values are immutable
/// once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn is_scalar(t: &Tensor) -> bool {
    t.numel() == 1
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[0, 0])),
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

    /// Perturbs the backward rule of every node of `kind` (scales its incoming
    /// adjoint by 1.5). Exists so the gradient checker can be shown to catch a
    /// broken rule.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::numeric(kind.name(), "non-finite output"));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = expect_matrix("matmul", ta)?;
        let (k2, n) = expect_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = expect_matrix("matmul_nt", ta)?;
        let (n, k2) = expect_matrix("matmul_nt", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = expect_matrix("transpose", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if is_scalar(tb) {
            let s = tb.data()[0];
            let data = ta.data().iter().map(|&x| f(x, s)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if is_scalar(ta) {
            let s = ta.data()[0];
            let data = tb.data().iter().map(|&y| f(s, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        };
        self.push(out, op)
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v * sigmoid_scalar(v), Op::Silu(x))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, gelu_scalar, Op::Gelu(x))
    }

    /// Row-wise softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::numeric("softmax_rows", "non-finite input"));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::SoftmaxRows(x))
    }

    /// RMS normalization over the last axis: `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (t, g) = (self.value(x), self.value(gain));
        let d = t.cols();
        if g.numel() != d {
            return Err(Error::dim("rmsnorm", t.shape(), g.shape()));
        }
        // eps = 0 is accepted for exact checks; an all-zero slice then stays zero.
        let rows = t.rows();
        let mut out = vec![0.0; t.numel()];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let xs = &t.data()[r * d..(r + 1) * d];
            let ms = xs.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let denom = (ms + eps).sqrt();
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_rms[r] = inv;
            for j in 0..d {
                out[r * d + j] = xs[j] * inv * g.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Inverted dropout. With `rng = None` (eval mode) or `p = 0` this returns
    /// `x` unchanged without recording a node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = expect_matrix("cross_entropy", t)?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        let out = Tensor::scalar(loss / b as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, b) = (self.value(x), self.value(bias));
        let (m, n) = expect_matrix("add_row_bias", t)?;
        if b.numel() != n {
            return Err(Error::dim("add_row_bias", t.shape(), b.shape()));
        }
        let mut out = t.data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::AddRowBias(x, bias))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = expect_matrix("slice_cols", t)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let m = expect_matrix("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = expect_matrix("concat_cols", self.value(p))?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = expect_matrix("slice_rows", t)?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let out = t.data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let n = expect_matrix("concat_rows", self.value(first))?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = expect_matrix("concat_rows", self.value(p))?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += r;
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Embedding lookup: row `index[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = expect_matrix("gather_rows", t)?;
        if index.is_empty() {
            return Err(Error::Usage("gather of zero rows".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::Data(format!("row index {bad} out of range for table of {m} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![index.len(), n], out)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
        )
    }

    /// Column means: `m×n -> 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = expect_matrix("mean_rows", t)?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&t.data()[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x))
    }

    /// Gated fusion of two `N×N` maps with column `col` of an `N×h` gate:
    /// `out[t, :] = g[t]·plus[t, :] − (1 − g[t])·minus[t, :]`.
    pub fn gated_fuse(&mut self, plus: Var, minus: Var, gate: Var, col: usize) -> Result<Var> {
        let (p, mi, g) = (self.value(plus), self.value(minus), self.value(gate));
        let (n, k) = expect_matrix("gated_fuse", p)?;
        if mi.shape() != p.shape() {
            return Err(Error::dim("gated_fuse", p.shape(), mi.shape()));
        }
        let (gn, gh) = expect_matrix("gated_fuse", g)?;
        if gn != n || col >= gh {
            return Err(Error::dim("gated_fuse", p.shape(), g.shape()));
        }
        let mut out = vec![0.0; n * k];
        for t in 0..n {
            let gt = g.data()[t * gh + col];
            for j in 0..k {
                out[t * k + j] = gt * p.data()[t * k + j] - (1.0 - gt) * mi.data()[t * k + j];
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        self.push(
            out,
            Op::GatedFuse {
                plus,
                minus,
                gate,
                col,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`]; intermediate adjoints do not persist.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            backprop_node(&self.nodes, i, &g, &mut adj);
        }

        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }
}

/// Adds `f`'s contribution into the adjoint slot of `v` when `v` needs a gradient.
fn accumulate(
    nodes: &[Node],
    adj: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(slot);
}

/// Gradient of a broadcasting binary op with respect to one operand:
/// `local(i)` is d out_i / d operand at output position `i`.
fn broadcast_acc(
    nodes: &[Node],
    adj: &mut [Option<Vec<f64>>],
    v: Var,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    let scalar = nodes[v.0].value.numel() == 1 && g.len() != 1;
    accumulate(nodes, adj, v, |acc| {
        if scalar {
            acc[0] += g.iter().enumerate().map(|(i, gi)| gi * local(i)).sum::<f64>();
        } else {
            for (i, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
                *a += gi * local(i);
            }
        }
    });
}

fn bval(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            accumulate(nodes, adj, *a, |acc| gemm_nt(g, tb.data(), acc, m, n, k));
            accumulate(nodes, adj, *b, |acc| gemm_tn(ta.data(), g, acc, m, k, n));
        }
        Op::MatMulNt(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            accumulate(nodes, adj, *a, |acc| gemm(g, tb.data(), acc, m, n, k));
            accumulate(nodes, adj, *b, |acc| gemm_tn(g, ta.data(), acc, m, n, k));
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            accumulate(nodes, adj, *x, |acc| {
                for p in 0..r {
                    for q in 0..c {
                        acc[p * c + q] += g[q * r + p];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            broadcast_acc(nodes, adj, *a, g, |_| 1.0);
            broadcast_acc(nodes, adj, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            broadcast_acc(nodes, adj, *a, g, |_| 1.0);
            broadcast_acc(nodes, adj, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            broadcast_acc(nodes, adj, *a, g, |j| bval(tb, j));
            broadcast_acc(nodes, adj, *b, g, |j| bval(ta, j));
        }
        Op::Scale(x, c) => accumulate(nodes, adj, *x, |acc| {
            acc.iter_mut().zip(g).for_each(|(a, gi)| *a += c * gi)
        }),
        Op::AddScalar(x) => accumulate(nodes, adj, *x, |acc| {
            acc.iter_mut().zip(g).for_each(|(a, gi)| *a += gi)
        }),
        Op::Exp(x) => accumulate(nodes, adj, *x, |acc| {
            for ((a, gi), y) in acc.iter_mut().zip(g).zip(out.data()) {
                *a += gi * y;
            }
        }),
        Op::Sigmoid(x) => accumulate(nodes, adj, *x, |acc| {
            for ((a, gi), y) in acc.iter_mut().zip(g).zip(out.data()) {
                *a += gi * y * (1.0 - y);
            }
        }),
        Op::Silu(x) => {
            let tx = &nodes[x.0].value;
            accumulate(nodes, adj, *x, |acc| {
                for ((a, gi), xv) in acc.iter_mut().zip(g).zip(tx.data()) {
                    let s = sigmoid_scalar(*xv);
                    *a += gi * (s + xv * s * (1.0 - s));
                }
            })
        }
        Op::Gelu(x) => {
            let tx = &nodes[x.0].value;
            accumulate(nodes, adj, *x, |acc| {
                for ((a, gi), xv) in acc.iter_mut().zip(g).zip(tx.data()) {
                    *a += gi * gelu_grad(*xv);
                }
            })
        }
        Op::SoftmaxRows(x) => {
            let (rows, cols) = (out.rows(), out.cols());
            accumulate(nodes, adj, *x, |acc| {
                for r in 0..rows {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        acc[r * cols + j] += y[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (tx, tg) = (&nodes[x.0].value, &nodes[gain.0].value);
            let d = tx.cols();
            let rows = tx.rows();
            accumulate(nodes, adj, *x, |acc| {
                for r in 0..rows {
                    let xs = &tx.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let inv = inv_rms[r];
                    let dot: f64 = (0..d).map(|j| gr[j] * tg.data()[j] * xs[j]).sum();
                    let coef = inv * inv * inv * dot / d as f64;
                    for j in 0..d {
                        acc[r * d + j] += inv * tg.data()[j] * gr[j] - coef * xs[j];
                    }
                }
            });
            accumulate(nodes, adj, *gain, |acc| {
                for r in 0..rows {
                    for j in 0..d {
                        acc[j] += g[r * d + j] * tx.data()[r * d + j] * inv_rms[r];
                    }
                }
            });
        }
        Op::Dropout { x, mask } => accumulate(nodes, adj, *x, |acc| {
            for ((a, gi), m) in acc.iter_mut().zip(g).zip(mask) {
                *a += gi * m;
            }
        }),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let b = labels.len();
            let c = probs.len() / b;
            let scale = g[0] / b as f64;
            accumulate(nodes, adj, *logits, |acc| {
                for r in 0..b {
                    for j in 0..c {
                        let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                        acc[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, adj, *x, |acc| acc.iter_mut().for_each(|a| *a += g[0])),
        Op::AddRowBias(x, bias) => {
            let n = out.cols();
            accumulate(nodes, adj, *x, |acc| {
                acc.iter_mut().zip(g).for_each(|(a, gi)| *a += gi)
            });
            accumulate(nodes, adj, *bias, |acc| {
                for (j, gi) in g.iter().enumerate() {
                    acc[j % n] += gi;
                }
            });
        }
        Op::SliceCols { x, start } => {
            let n = nodes[x.0].value.cols();
            let (m, len) = (out.shape()[0], out.shape()[1]);
            accumulate(nodes, adj, *x, |acc| {
                for r in 0..m {
                    for j in 0..len {
                        acc[r * n + start + j] += g[r * len + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let n = out.cols();
            let m = out.shape()[0];
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                accumulate(nodes, adj, *p, |acc| {
                    for r in 0..m {
                        for j in 0..w {
                            acc[r * w + j] += g[r * n + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            let n = out.cols();
            accumulate(nodes, adj, *x, |acc| {
                for (j, gi) in g.iter().enumerate() {
                    acc[start * n + j] += gi;
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                accumulate(nodes, adj, *p, |acc| {
                    acc.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(a, gi)| *a += gi)
                });
                offset += len;
            }
        }
        Op::GatherRows { table, index } => {
            let n = out.cols();
            accumulate(nodes, adj, *table, |acc| {
                for (r, &row) in index.iter().enumerate() {
                    for j in 0..n {
                        acc[row * n + j] += g[r * n + j];
                    }
                }
            });
        }
        Op::MeanRows(x) => {
            let (m, n) = (nodes[x.0].value.shape()[0], out.cols());
            accumulate(nodes, adj, *x, |acc| {
                for r in 0..m {
                    for j in 0..n {
                        acc[r * n + j] += g[j] / m as f64;
                    }
                }
            });
        }
        Op::GatedFuse {
            plus,
            minus,
            gate,
            col,
        } => {
            let (tp, tm, tg) = (
                &nodes[plus.0].value,
                &nodes[minus.0].value,
                &nodes[gate.0].value,
            );
            let (n, k) = (tp.shape()[0], tp.shape()[1]);
            let gh = tg.cols();
            accumulate(nodes, adj, *plus, |acc| {
                for t in 0..n {
                    let gt = tg.data()[t * gh + col];
                    for j in 0..k {
                        acc[t * k + j] += gt * g[t * k + j];
                    }
                }
            });
            accumulate(nodes, adj, *minus, |acc| {
                for t in 0..n {
                    let gt = tg.data()[t * gh + col];
                    for j in 0..k {
                        acc[t * k + j] -= (1.0 - gt) * g[t * k + j];
                    }
                }
            });
            accumulate(nodes, adj, *gate, |acc| {
                for t in 0..n {
                    let s: f64 = (0..k)
                        .map(|j| g[t * k + j] * (tp.data()[t * k + j] + tm.data()[t * k + j]))
                        .sum();
                    acc[t * gh + col] += s;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let m = mat(&[vec![1.5, -2.0], vec![0.25, 4.0]]);
        let i = tape.constant(Tensor::eye(2));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(out), &m);

        let a = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(mat(&[vec![5.0], vec![6.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dimension_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![1, 4]));
        let s = tape.softmax_rows(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);

        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        assert_abs_diff_eq!(tape.value(s).data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(s).data()[1], 0.75, epsilon = 1e-15);

        let big = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap());
        let s = tape.softmax_rows(big).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_nan_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn sigmoid_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 50.0, 2.5, -2.5]));
        let s = tape.sigmoid(x).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[0], 0.5);
        assert!((1.0 - d[1]).abs() < 1e-15);
        assert_abs_diff_eq!(d[2] + d[3], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let z = tape.constant(Tensor::zeros(vec![3]));
        let s = tape.add(t, z).unwrap();
        assert_eq!(tape.value(s), tape.value(t));

        let zero = tape.constant(Tensor::scalar(0.0));
        let e = tape.exp(zero).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0]);

        let x = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let y = tape.silu(x).unwrap();
        let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert_abs_diff_eq!(tape.value(y).data()[1], sigma1, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).data()[1], 0.731058, epsilon = 1e-6);

        let bad = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.add(t, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rmsnorm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let x = tape.constant(Tensor::vector(vec![2.0, 2.0]));
        let y = tape.rmsnorm(x, ones, 1e-300).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 1.0, epsilon = 1e-12);

        let zero = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let gain = tape.constant(Tensor::vector(vec![3.0, -1.0]));
        let y = tape.rmsnorm(zero, gain, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.rmsnorm(x, ones, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert_abs_diff_eq!(tape.value(y).data()[0], 3.0 / r, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).data()[1], 4.0 / r, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).data()[0], 0.848528, epsilon = 1e-6);
        assert_abs_diff_eq!(tape.value(y).data()[1], 1.131371, epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(vec![1, 4]));
        let l = tape.cross_entropy(u, &[2]).unwrap();
        assert_abs_diff_eq!(tape.value(l).data()[0], 4f64.ln(), epsilon = 1e-15);

        let sat = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 50.0, 0.0]).unwrap());
        let l = tape.cross_entropy(sat, &[1]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-20);

        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let l = tape.cross_entropy(x, &[1]).unwrap();
        let closed = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert_abs_diff_eq!(tape.value(l).data()[0], closed, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(l).data()[0], 0.313262, epsilon = 1e-6);

        assert!(matches!(tape.cross_entropy(x, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        // A second sweep accumulates into the leaf.
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn dropout_modes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![4], 2.0));
        assert_eq!(tape.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(tape.dropout::<rand_chacha::ChaCha8Rng>(x, 0.7, None).unwrap(), x);
        assert!(matches!(
            tape.dropout(x, 1.0, Some(&mut rng)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_monte_carlo() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let n = 100_000;
        let input: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let mean_in = input.iter().sum::<f64>() / n as f64;
        let x = tape.constant(Tensor::vector(input));
        let y = tape.dropout(x, 0.5, Some(&mut rng)).unwrap();
        let out = tape.value(y).data();
        let survivors = out.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        let mean_out = out.iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.02);
    }

    #[test]
    fn fault_injection_changes_gradient() {
        let run = |fault: bool| {
            let mut tape = Tape::new();
            if fault {
                tape.inject_backward_fault(OpKind::Exp);
            }
            let x = tape.param(Tensor::vector(vec![0.5]));
            let e = tape.exp(x).unwrap();
            let s = tape.sum(e).unwrap();
            tape.backward(s).unwrap();
            tape.grad(x).unwrap()[0]
        };
        assert!((run(true) / run(false) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn op_names_round_trip() {
        for name in ["matmul", "softmax_rows", "gated_fuse", "rmsnorm"] {
            assert_eq!(OpKind::from_name(name).unwrap().name(), name);
        }
        assert!(OpKind::from_name("conv2d").is_none());
    }
}
