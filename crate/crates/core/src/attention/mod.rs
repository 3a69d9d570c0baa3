//! Scaled dot-product attention, Differential Attention, and multi-head
//! differential gated self-attention (M-DGSA).
//!
//! All three share one head layout. With `h` heads and model width `d`, each
//! head owns a `2·d'` column block of the projected `Q`, `K` and `V`
//! (`d' = d / 2h`). Inside a block the first `d'` columns form the excitatory
//! stream (`Q⁺`, `K⁺`) and the last `d'` the inhibitory stream (`Q⁻`, `K⁻`);
//! the full `2·d'` block of `V` is shared by both streams.
//!
//! M-DGSA fuses the two softmax maps of each head with a per-token sigmoid gate,
//!
//! ```text
//! A[t, :] = g[t] · A⁺[t, :] − (1 − g[t]) · A⁻[t, :]
//! ```
//!
//! so every fused row sums to `2g − 1`. Head outputs `A·V` are RMS-normalized,
//! scaled by `1 − λ_init`, concatenated and projected by `W_O`.

mod inhibition;

pub use inhibition::lateral_inhibition_reference;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// RMS epsilon used by the head-wise normalization.
pub const NORM_EPS: f64 = 1e-6;

/// `0.8 − 0.6·exp(−0.3·(l − 1))` for 1-based layer index `l`.
pub fn lambda_init_schedule(layer: usize) -> Result<f64> {
    if layer < 1 {
        return Err(Error::Config("layer index must be >= 1".into()));
    }
    Ok(0.2 + 0.6 * (1.0 - (-0.3 * (layer as f64 - 1.0)).exp()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub d_model: usize,
    pub heads: usize,
    /// Per-stream, per-head width `d'`.
    pub d_half: usize,
}

impl HeadLayout {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % (2 * heads) != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by 2 x {heads} heads"
            )));
        }
        Ok(Self {
            d_model,
            heads,
            d_half: d_model / (2 * heads),
        })
    }

    pub fn value_width(&self) -> usize {
        2 * self.d_half
    }
}

/// What the attention block adds back to `O·W_O`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttnResidual {
    #[default]
    None,
    /// The projected query matrix `X·W_Q`.
    Query,
    /// The block input `X`.
    Input,
}

impl AttnResidual {
    pub fn name(self) -> &'static str {
        match self {
            AttnResidual::None => "none",
            AttnResidual::Query => "query",
            AttnResidual::Input => "input",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "off" => Some(AttnResidual::None),
            "query" => Some(AttnResidual::Query),
            "input" => Some(AttnResidual::Input),
            _ => None,
        }
    }
}

/// Learnable tensors of one attention layer plus its fixed `λ_init`.
///
/// The gate tensors are used by M-DGSA, the four `λ` vectors by the
/// Differential Attention baseline; vanilla attention uses only the four
/// projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
    pub norm_gain: Tensor,
    pub lambda_q1: Tensor,
    pub lambda_k1: Tensor,
    pub lambda_q2: Tensor,
    pub lambda_k2: Tensor,
    pub lambda_init: f64,
}

pub(crate) fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

pub(crate) fn lambda_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    let normal = Normal::new(0.0, 0.1).expect("valid std");
    Tensor::vector((0..n).map(|_| normal.sample(rng)).collect())
}

impl AttentionParams {
    /// Projections uniform in `±1/√fan_in`, gate zero (g = 0.5), gain one,
    /// `λ` vectors `N(0, 0.1²)`.
    pub fn init<R: Rng + ?Sized>(layout: HeadLayout, lambda_init: f64, rng: &mut R) -> Result<Self> {
        if !(lambda_init > 0.0 && lambda_init < 1.0) {
            return Err(Error::Config(format!("lambda_init {lambda_init} outside (0, 1)")));
        }
        let d = layout.d_model;
        Ok(Self {
            w_q: uniform_matrix(rng, d, d),
            w_k: uniform_matrix(rng, d, d),
            w_v: uniform_matrix(rng, d, d),
            w_o: uniform_matrix(rng, d, d),
            w_g: Tensor::zeros(vec![d, layout.heads]),
            b_g: Tensor::zeros(vec![layout.heads]),
            norm_gain: Tensor::filled(vec![layout.value_width()], 1.0),
            lambda_q1: lambda_vector(rng, layout.d_half),
            lambda_k1: lambda_vector(rng, layout.d_half),
            lambda_q2: lambda_vector(rng, layout.d_half),
            lambda_k2: lambda_vector(rng, layout.d_half),
            lambda_init,
        })
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
            gate: Some((tape.param(self.w_g.clone()), tape.param(self.b_g.clone()))),
            norm_gain: Some(tape.param(self.norm_gain.clone())),
            lambdas: Some([
                tape.param(self.lambda_q1.clone()),
                tape.param(self.lambda_k1.clone()),
                tape.param(self.lambda_q2.clone()),
                tape.param(self.lambda_k2.clone()),
            ]),
            lambda_init: self.lambda_init,
        }
    }

    /// `exp(⟨λ_q1, λ_k1⟩) − exp(⟨λ_q2, λ_k2⟩) + λ_init`.
    pub fn diff_lambda_value(&self) -> f64 {
        let dot = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
        dot(&self.lambda_q1, &self.lambda_k1).exp() - dot(&self.lambda_q2, &self.lambda_k2).exp()
            + self.lambda_init
    }
}

/// Tape handles of one layer's parameters. Optional members are absent for
/// variants that do not use them.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub gate: Option<(Var, Var)>,
    pub norm_gain: Option<Var>,
    /// `[λ_q1, λ_k1, λ_q2, λ_k2]`.
    pub lambdas: Option<[Var; 4]>,
    pub lambda_init: f64,
}

/// Intermediate maps of one attention layer, kept for inspection and rollout.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    /// `h×N×N`; the single map for vanilla attention, `A₁` for DiffAttn.
    pub a_plus: Tensor,
    /// `h×N×N`; absent for vanilla attention.
    pub a_minus: Option<Tensor>,
    /// `N×h` gate values, M-DGSA only.
    pub gate: Option<Tensor>,
    /// `h×N×N` signed map actually applied to `V`.
    pub fused: Tensor,
    /// DiffAttn's `λ`.
    pub lambda: Option<f64>,
}

/// Per-head stream projections.
#[derive(Clone, Debug)]
pub struct Streams {
    /// Full `X·W_Q`, kept for the query residual.
    pub q: Var,
    pub q_plus: Vec<Var>,
    pub q_minus: Vec<Var>,
    pub k_plus: Vec<Var>,
    pub k_minus: Vec<Var>,
    pub v: Vec<Var>,
}

fn check_width(tape: &Tape, x: Var, layout: &HeadLayout) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != layout.d_model {
        return Err(Error::dim("attention input", s, &[0, layout.d_model]));
    }
    Ok(())
}

/// Projects `X` and slices each head's `Q⁺, Q⁻, K⁺, K⁻` (`N×d'`) and `V` (`N×2d'`).
pub fn split_streams(
    tape: &mut Tape,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    layout: &HeadLayout,
) -> Result<Streams> {
    check_width(tape, x, layout)?;
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let dh = layout.d_half;
    let mut s = Streams {
        q,
        q_plus: Vec::with_capacity(layout.heads),
        q_minus: Vec::with_capacity(layout.heads),
        k_plus: Vec::with_capacity(layout.heads),
        k_minus: Vec::with_capacity(layout.heads),
        v: Vec::with_capacity(layout.heads),
    };
    for i in 0..layout.heads {
        let base = 2 * i * dh;
        s.q_plus.push(tape.slice_cols(q, base, dh)?);
        s.q_minus.push(tape.slice_cols(q, base + dh, dh)?);
        s.k_plus.push(tape.slice_cols(k, base, dh)?);
        s.k_minus.push(tape.slice_cols(k, base + dh, dh)?);
        s.v.push(tape.slice_cols(v, base, 2 * dh)?);
    }
    Ok(s)
}

/// `softmax_rows(Q·Kᵀ / √width)`.
pub fn scaled_softmax_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let width = tape.shape(q)[1];
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / (width as f64).sqrt())?;
    tape.softmax_rows(s)
}

/// `σ(X·W_g + b_g)`, one gate per token and head.
pub fn token_head_gate(tape: &mut Tape, x: Var, w_g: Var, b_g: Var) -> Result<Var> {
    let z = tape.matmul(x, w_g)?;
    let z = tape.add_row_bias(z, b_g)?;
    tape.sigmoid(z)
}

/// Plain-tensor form of the gated fusion over all heads:
/// `a_plus, a_minus: h×N×N`, `gate: N×h`.
pub fn fuse_gated_maps(a_plus: &Tensor, a_minus: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let s = a_plus.shape();
    if s.len() != 3 || a_minus.shape() != s {
        return Err(Error::dim("fuse_gated_maps", s, a_minus.shape()));
    }
    let (h, n, k) = (s[0], s[1], s[2]);
    if gate.shape() != [n, h] {
        return Err(Error::dim("fuse_gated_maps", s, gate.shape()));
    }
    let mut out = vec![0.0; h * n * k];
    for i in 0..h {
        for t in 0..n {
            let g = gate.get2(t, i);
            for j in 0..k {
                let at = (i * n + t) * k + j;
                out[at] = g * a_plus.data()[at] - (1.0 - g) * a_minus.data()[at];
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// DiffAttn's `λ` as a differentiable scalar.
pub fn diff_lambda_value(tape: &mut Tape, lambdas: &[Var; 4], lambda_init: f64) -> Result<Var> {
    let [q1, k1, q2, k2] = *lambdas;
    let p1 = tape.mul(q1, k1)?;
    let d1 = tape.sum(p1)?;
    let e1 = tape.exp(d1)?;
    let p2 = tape.mul(q2, k2)?;
    let d2 = tape.sum(p2)?;
    let e2 = tape.exp(d2)?;
    let diff = tape.sub(e1, e2)?;
    tape.add_scalar(diff, lambda_init)
}

/// RMS-normalizes one head output (`N×2d'`) with the shared gain and scales it
/// by `1 − λ`.
pub fn headwise_groupnorm(tape: &mut Tape, head: Var, gain: Var, lambda: f64) -> Result<Var> {
    let n = tape.rmsnorm(head, gain, NORM_EPS)?;
    tape.scale(n, 1.0 - lambda)
}

fn finish(
    tape: &mut Tape,
    x: Var,
    q: Var,
    heads: &[Var],
    w_o: Var,
    residual: AttnResidual,
) -> Result<Var> {
    let o = tape.concat_cols(heads)?;
    let y = tape.matmul(o, w_o)?;
    match residual {
        AttnResidual::None => Ok(y),
        AttnResidual::Query => tape.add(y, q),
        AttnResidual::Input => tape.add(y, x),
    }
}

fn stack_values(tape: &Tape, vars: &[Var]) -> Result<Tensor> {
    let parts: Vec<Tensor> = vars.iter().map(|&v| tape.value(v).clone()).collect();
    Tensor::stack(&parts)
}

/// Multi-head differential gated self-attention on one sequence `X: N×d`.
///
/// `lambda_l` is the layer's fixed `λ_init` (schedule value or override); it
/// only enters through the `(1 − λ_l)` output scaling.
pub fn mdgsa_forward(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    layout: &HeadLayout,
    lambda_l: f64,
    residual: AttnResidual,
) -> Result<(Var, AttentionMaps)> {
    let (w_g, b_g) = p
        .gate
        .ok_or_else(|| Error::Usage("M-DGSA needs gate parameters".into()))?;
    let gain = p
        .norm_gain
        .ok_or_else(|| Error::Usage("M-DGSA needs a norm gain".into()))?;
    let s = split_streams(tape, x, p.w_q, p.w_k, p.w_v, layout)?;
    let gate = token_head_gate(tape, x, w_g, b_g)?;

    let mut plus = Vec::with_capacity(layout.heads);
    let mut minus = Vec::with_capacity(layout.heads);
    let mut fused = Vec::with_capacity(layout.heads);
    let mut heads = Vec::with_capacity(layout.heads);
    for i in 0..layout.heads {
        let ap = scaled_softmax_scores(tape, s.q_plus[i], s.k_plus[i])?;
        let am = scaled_softmax_scores(tape, s.q_minus[i], s.k_minus[i])?;
        let a = tape.gated_fuse(ap, am, gate, i)?;
        let hv = tape.matmul(a, s.v[i])?;
        heads.push(headwise_groupnorm(tape, hv, gain, lambda_l)?);
        plus.push(ap);
        minus.push(am);
        fused.push(a);
    }
    let y = finish(tape, x, s.q, &heads, p.w_o, residual)?;
    let maps = AttentionMaps {
        a_plus: stack_values(tape, &plus)?,
        a_minus: Some(stack_values(tape, &minus)?),
        gate: Some(tape.value(gate).clone()),
        fused: stack_values(tape, &fused)?,
        lambda: None,
    };
    Ok((y, maps))
}

/// Differential Attention baseline: per head `(A₁ − λ·A₂)·V`, then the same
/// head-wise normalization scaled by `1 − λ_init`.
pub fn diff_attn_forward(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    layout: &HeadLayout,
    residual: AttnResidual,
) -> Result<(Var, AttentionMaps)> {
    let lambdas = p
        .lambdas
        .ok_or_else(|| Error::Usage("DiffAttn needs lambda vectors".into()))?;
    let gain = p
        .norm_gain
        .ok_or_else(|| Error::Usage("DiffAttn needs a norm gain".into()))?;
    let s = split_streams(tape, x, p.w_q, p.w_k, p.w_v, layout)?;
    let lambda = diff_lambda_value(tape, &lambdas, p.lambda_init)?;

    let mut plus = Vec::with_capacity(layout.heads);
    let mut minus = Vec::with_capacity(layout.heads);
    let mut fused = Vec::with_capacity(layout.heads);
    let mut heads = Vec::with_capacity(layout.heads);
    for i in 0..layout.heads {
        let a1 = scaled_softmax_scores(tape, s.q_plus[i], s.k_plus[i])?;
        let a2 = scaled_softmax_scores(tape, s.q_minus[i], s.k_minus[i])?;
        let scaled = tape.mul(lambda, a2)?;
        let a = tape.sub(a1, scaled)?;
        let hv = tape.matmul(a, s.v[i])?;
        heads.push(headwise_groupnorm(tape, hv, gain, p.lambda_init)?);
        plus.push(a1);
        minus.push(a2);
        fused.push(a);
    }
    let y = finish(tape, x, s.q, &heads, p.w_o, residual)?;
    let maps = AttentionMaps {
        a_plus: stack_values(tape, &plus)?,
        a_minus: Some(stack_values(tape, &minus)?),
        gate: None,
        fused: stack_values(tape, &fused)?,
        lambda: Some(tape.value(lambda).data()[0]),
    };
    Ok((y, maps))
}

/// Standard multi-head attention with per-head width `d / h`.
pub fn vanilla_mha_forward(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    heads: usize,
    residual: AttnResidual,
) -> Result<(Var, AttentionMaps)> {
    let d = tape.shape(x).get(1).copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} is not divisible by {heads} heads")));
    }
    let w = d / heads;
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let mut maps = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_cols(q, i * w, w)?;
        let ki = tape.slice_cols(k, i * w, w)?;
        let vi = tape.slice_cols(v, i * w, w)?;
        let a = scaled_softmax_scores(tape, qi, ki)?;
        outs.push(tape.matmul(a, vi)?);
        maps.push(a);
    }
    let y = finish(tape, x, q, &outs, p.w_o, residual)?;
    let a = stack_values(tape, &maps)?;
    let maps = AttentionMaps {
        a_plus: a.clone(),
        a_minus: None,
        gate: None,
        fused: a,
        lambda: None,
    };
    Ok((y, maps))
}
