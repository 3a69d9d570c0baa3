//! Straight-line reference implementations used as independent oracles, plus
//! random instance builders shared by the integration tests.
#![allow(dead_code)]

use dgsa::attention::{AttentionVars, AttnResidual, HeadLayout};
use dgsa::rng::Rng;
use dgsa::tensor::{Tape, Tensor, Var};
use rand::{Rng as _, SeedableRng};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Mat {
    (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn softmax_scores(q: &Mat, k: &Mat) -> Mat {
    let w = q[0].len() as f64;
    q.iter()
        .map(|qr| {
            let s: Vec<f64> = k
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / w.sqrt())
                .collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One random M-DGSA layer and input sequence.
#[derive(Clone, Debug)]
pub struct Instance {
    pub layout: HeadLayout,
    pub x: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub w_g: Mat,
    pub b_g: Vec<f64>,
    pub gain: Vec<f64>,
    pub lambda_l: f64,
}

impl Instance {
    pub fn random(rng: &mut Rng, n: usize, heads: usize, d_half: usize) -> Self {
        let d = 2 * heads * d_half;
        let layout = HeadLayout::new(d, heads).unwrap();
        Self {
            layout,
            x: random_mat(rng, n, d, 1.0),
            w_q: random_mat(rng, d, d, 1.0),
            w_k: random_mat(rng, d, d, 1.0),
            w_v: random_mat(rng, d, d, 1.0),
            w_o: random_mat(rng, d, d, 1.0),
            w_g: random_mat(rng, d, heads, 1.0),
            b_g: (0..heads).map(|_| rng.random_range(-1.0..1.0)).collect(),
            gain: (0..2 * d_half).map(|_| rng.random_range(0.5..1.5)).collect(),
            lambda_l: rng.random_range(0.2..0.8),
        }
    }

    /// Binds the input as a constant and every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> (Var, AttentionVars) {
        let x = tape.constant(to_tensor(&self.x));
        let v = AttentionVars {
            w_q: tape.param(to_tensor(&self.w_q)),
            w_k: tape.param(to_tensor(&self.w_k)),
            w_v: tape.param(to_tensor(&self.w_v)),
            w_o: tape.param(to_tensor(&self.w_o)),
            gate: Some((
                tape.param(to_tensor(&self.w_g)),
                tape.param(Tensor::vector(self.b_g.clone())),
            )),
            norm_gain: Some(tape.param(Tensor::vector(self.gain.clone()))),
            lambdas: None,
            lambda_init: self.lambda_l,
        };
        (x, v)
    }
}

/// Knobs that turn the oracle into the reduced pipelines.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleMode {
    /// Replace every gate value with this constant.
    pub gate: Option<f64>,
    /// Drop the inhibitory map entirely.
    pub zero_minus: bool,
}

pub struct OracleOut {
    pub y: Mat,
    /// Per head `N×N`.
    pub fused: Vec<Mat>,
    /// `N×h`.
    pub gate: Mat,
}

/// M-DGSA written out as loops over explicit indices.
pub fn mdgsa_oracle(inst: &Instance, residual: AttnResidual, mode: OracleMode) -> OracleOut {
    let (h, dh) = (inst.layout.heads, inst.layout.d_half);
    let n = inst.x.len();
    let q = matmul(&inst.x, &inst.w_q);
    let k = matmul(&inst.x, &inst.w_k);
    let v = matmul(&inst.x, &inst.w_v);
    let logits = matmul(&inst.x, &inst.w_g);
    let gate: Mat = (0..n)
        .map(|t| {
            (0..h)
                .map(|i| match mode.gate {
                    Some(g) => g,
                    None => 1.0 / (1.0 + (-(logits[t][i] + inst.b_g[i])).exp()),
                })
                .collect()
        })
        .collect();
    let mut concat = vec![Vec::with_capacity(inst.layout.d_model); n];
    let mut fused_all = Vec::with_capacity(h);
    for i in 0..h {
        let base = 2 * i * dh;
        let ap = softmax_scores(&cols(&q, base, dh), &cols(&k, base, dh));
        let am = softmax_scores(&cols(&q, base + dh, dh), &cols(&k, base + dh, dh));
        let mut fused = vec![vec![0.0; n]; n];
        for t in 0..n {
            for j in 0..n {
                let minus = if mode.zero_minus { 0.0 } else { am[t][j] };
                fused[t][j] = gate[t][i] * ap[t][j] - (1.0 - gate[t][i]) * minus;
            }
        }
        let vh = cols(&v, base, 2 * dh);
        let head = matmul(&fused, &vh);
        for t in 0..n {
            let ms: f64 = head[t].iter().map(|a| a * a).sum::<f64>() / (2 * dh) as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            for c in 0..2 * dh {
                concat[t].push(head[t][c] * inv * inst.gain[c] * (1.0 - inst.lambda_l));
            }
        }
        fused_all.push(fused);
    }
    let mut y = matmul(&concat, &inst.w_o);
    for t in 0..n {
        for c in 0..inst.layout.d_model {
            y[t][c] += match residual {
                AttnResidual::None => 0.0,
                AttnResidual::Query => q[t][c],
                AttnResidual::Input => inst.x[t][c],
            };
        }
    }
    OracleOut {
        y,
        fused: fused_all,
        gate,
    }
}

/// Every integration-test preset: three variants on both tasks.
pub fn all_variants() -> [dgsa::model::Variant; 3] {
    use dgsa::model::Variant;
    [Variant::Vanilla, Variant::Diff, Variant::Dgsa]
}
