//! Pre-norm encoder classifiers over tokens or image patches, with vanilla,
//! differential or differential-gated attention.
//!
//! Block: `x += Attn(RMSNorm(x))`, `x += FFN(RMSNorm(x))`. After the last
//! block a final RMSNorm feeds the head, which reads the mean over token
//! positions (text) or the class token at row 0 (vision).

mod checkpoint;
mod ffn;
mod patch;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ffn::{gelu_ffn, swiglu_ffn, FfnDropout};
pub use patch::{patchify, unpatchify};

use std::collections::BTreeMap;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::attention::{
    diff_attn_forward, lambda_init_schedule, lambda_vector, mdgsa_forward, uniform_matrix, vanilla_mha_forward,
    AttentionMaps, AttentionVars, AttnResidual, HeadLayout,
};
use crate::data::{Batch, Inputs, PAD};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    Diff,
    Dgsa,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Diff => "diff",
            Variant::Dgsa => "dgsa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(Variant::Vanilla),
            "diff" => Some(Variant::Diff),
            "dgsa" => Some(Variant::Dgsa),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    SwiGlu,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::SwiGlu => "swiglu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "swiglu" => Some(Activation::SwiGlu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Text { vocab_size: usize, max_seq_len: usize },
    Vision { image_size: usize, patch_size: usize, channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub task: Task,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_expansion: f64,
    pub ffn_activation: Activation,
    pub dropout: f64,
    pub n_dropout: usize,
    pub attn_residual: AttnResidual,
    pub n_classes: usize,
    /// Fixed `λ_init` for every layer; `None` follows the depth schedule.
    pub lambda_init: Option<f64>,
    /// Depth of the gate network. Only a single linear layer is supported.
    pub gate_layers: usize,
}

impl ModelConfig {
    pub fn text_tiny(variant: Variant) -> Self {
        Self {
            variant,
            task: Task::Text {
                vocab_size: 50,
                max_seq_len: 16,
            },
            depth: 2,
            d_model: 64,
            heads: 4,
            ffn_expansion: if variant == Variant::Vanilla { 4.0 } else { 2.0 },
            ffn_activation: if variant == Variant::Vanilla {
                Activation::Gelu
            } else {
                Activation::SwiGlu
            },
            dropout: 0.0,
            n_dropout: 1,
            attn_residual: AttnResidual::None,
            n_classes: 4,
            lambda_init: None,
            gate_layers: 1,
        }
    }

    pub fn vision_tiny(variant: Variant) -> Self {
        Self {
            task: Task::Vision {
                image_size: 8,
                patch_size: 2,
                channels: 1,
            },
            attn_residual: if variant == Variant::Vanilla {
                AttnResidual::None
            } else {
                AttnResidual::Query
            },
            ..Self::text_tiny(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return cfg("depth must be >= 1".into());
        }
        if self.heads == 0 || self.d_model == 0 {
            return cfg("d_model and heads must be >= 1".into());
        }
        let div = if self.variant == Variant::Vanilla { self.heads } else { 2 * self.heads };
        if self.d_model % div != 0 {
            return cfg(format!(
                "d_model {} must be divisible by {div} for the {} variant",
                self.d_model,
                self.variant.name()
            ));
        }
        if !(self.ffn_expansion > 0.0 && self.ffn_expansion.is_finite()) || self.ffn_hidden() == 0 {
            return cfg(format!("ffn_expansion {} gives an empty hidden layer", self.ffn_expansion));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(1..=2).contains(&self.n_dropout) {
            return cfg(format!("n_dropout must be 1 or 2, got {}", self.n_dropout));
        }
        if self.gate_layers != 1 {
            return cfg(format!("gate_layers must be 1, got {}", self.gate_layers));
        }
        if self.n_classes < 2 {
            return cfg("n_classes must be >= 2".into());
        }
        if let Some(l) = self.lambda_init {
            if !(l > 0.0 && l < 1.0) {
                return cfg(format!("lambda_init {l} outside (0, 1)"));
            }
        }
        match self.task {
            Task::Text {
                vocab_size,
                max_seq_len,
            } => {
                if vocab_size < 3 || max_seq_len == 0 {
                    return cfg("text task needs vocab_size >= 3 and max_seq_len >= 1".into());
                }
            }
            Task::Vision {
                image_size,
                patch_size,
                channels,
            } => {
                if channels == 0 || patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
                    return cfg(format!(
                        "image_size {image_size} must be a positive multiple of patch_size {patch_size}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hidden width `m`: `floor(e·d/2)` for SwiGLU (up-projection `2m`),
    /// `floor(e·d)` for GeLU.
    pub fn ffn_hidden(&self) -> usize {
        let w = self.ffn_expansion * self.d_model as f64;
        match self.ffn_activation {
            Activation::SwiGlu => (w / 2.0).floor() as usize,
            Activation::Gelu => w.floor() as usize,
        }
    }

    /// `λ_init` of 1-based layer `l`.
    pub fn lambda_for(&self, layer: usize) -> Result<f64> {
        match self.lambda_init {
            Some(v) => Ok(v),
            None => lambda_init_schedule(layer),
        }
    }

    /// Rows of the positional table.
    pub fn positions(&self) -> usize {
        match self.task {
            Task::Text { max_seq_len, .. } => max_seq_len,
            Task::Vision {
                image_size,
                patch_size,
                ..
            } => (image_size / patch_size).pow(2) + 1,
        }
    }

    pub fn task_name(&self) -> &'static str {
        match self.task {
            Task::Text { .. } => "text",
            Task::Vision { .. } => "vision",
        }
    }

    /// Every architecture key (`model.*`) with its canonical value, sorted by
    /// key. Keys of the other task are omitted.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(&str, String)> = vec![
            ("variant", self.variant.name().into()),
            ("task", self.task_name().into()),
            ("depth", self.depth.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_expansion", self.ffn_expansion.to_string()),
            ("ffn_activation", self.ffn_activation.name().into()),
            ("dropout", self.dropout.to_string()),
            ("n_dropout", self.n_dropout.to_string()),
            ("attn_residual", self.attn_residual.name().into()),
            ("n_classes", self.n_classes.to_string()),
            (
                "lambda_init",
                self.lambda_init.map_or_else(|| "schedule".into(), |v| v.to_string()),
            ),
            ("gate_layers", self.gate_layers.to_string()),
        ];
        match self.task {
            Task::Text {
                vocab_size,
                max_seq_len,
            } => {
                kv.push(("vocab_size", vocab_size.to_string()));
                kv.push(("max_seq_len", max_seq_len.to_string()));
            }
            Task::Vision {
                image_size,
                patch_size,
                channels,
            } => {
                kv.push(("image_size", image_size.to_string()));
                kv.push(("patch_size", patch_size.to_string()));
                kv.push(("channels", channels.to_string()));
            }
        }
        let mut out: Vec<(String, String)> = kv.into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
        out.sort();
        out
    }

    pub fn canonical(&self) -> String {
        self.canonical_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 of [`ModelConfig::canonical`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embedding,
    Position,
    ClassToken,
    PatchProjection,
    Attention,
    Gate,
    Lambda,
    GroupNorm,
    Norm,
    Ffn,
    Head,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Position => "position",
            ParamGroup::ClassToken => "class_token",
            ParamGroup::PatchProjection => "patch_projection",
            ParamGroup::Attention => "attention",
            ParamGroup::Gate => "gate",
            ParamGroup::Lambda => "lambda",
            ParamGroup::GroupNorm => "group_norm",
            ParamGroup::Norm => "norm",
            ParamGroup::Ffn => "ffn",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// False for biases and norm gains.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
}

#[derive(Clone, Debug)]
enum EmbedIndex {
    Text { tokens: usize, pos: usize },
    Vision { patch_w: usize, patch_b: usize, cls: usize, pos: usize },
}

#[derive(Clone, Debug)]
struct LayerIndex {
    attn_norm: usize,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: usize,
    gate: Option<(usize, usize)>,
    group_norm: Option<usize>,
    lambdas: Option<[usize; 4]>,
    ffn_norm: usize,
    up: usize,
    down: usize,
    lambda_init: f64,
}

#[derive(Clone, Debug)]
struct Index {
    embed: EmbedIndex,
    layers: Vec<LayerIndex>,
    final_norm: usize,
    head_w: usize,
    head_b: usize,
}

/// A built model: parameters in declaration order plus the layout needed to
/// run them.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Param>,
    index: Index,
}

/// Uniform in `±1/√fan_in`.
fn uniform(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("positive extents")
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn push(&mut self, name: String, group: ParamGroup, value: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name,
            group,
            value,
            decay,
        });
        self.params.len() - 1
    }
}

/// Builds and initializes a model. Matrices are uniform in `±1/√fan_in`
/// (embedding, positional and class-token tables use `fan_in = d_model`),
/// gates and biases start at zero, norm gains at one and DiffAttn `λ`
/// vectors at `N(0, 0.1²)`.
pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut b = Builder { params: Vec::new() };
    use ParamGroup as G;

    let embed = match cfg.task {
        Task::Text { vocab_size, .. } => EmbedIndex::Text {
            tokens: b.push("embed.tokens".into(), G::Embedding, uniform(rng, vec![vocab_size, d], d), true),
            pos: b.push("embed.pos".into(), G::Position, uniform(rng, vec![cfg.positions(), d], d), true),
        },
        Task::Vision {
            patch_size,
            channels,
            ..
        } => {
            let fan = channels * patch_size * patch_size;
            EmbedIndex::Vision {
                patch_w: b.push("embed.patch_w".into(), G::PatchProjection, uniform_matrix(rng, fan, d), true),
                patch_b: b.push("embed.patch_b".into(), G::PatchProjection, Tensor::zeros(vec![d]), false),
                cls: b.push("embed.cls".into(), G::ClassToken, uniform(rng, vec![1, d], d), true),
                pos: b.push("embed.pos".into(), G::Position, uniform(rng, vec![cfg.positions(), d], d), true),
            }
        }
    };

    let m = cfg.ffn_hidden();
    let mut layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let p = |s: &str| format!("layers.{l}.{s}");
        let lambda_init = cfg.lambda_for(l + 1)?;
        let attn_norm = b.push(p("attn_norm"), G::Norm, Tensor::filled(vec![d], 1.0), false);
        let w_q = b.push(p("attn.w_q"), G::Attention, uniform_matrix(rng, d, d), true);
        let w_k = b.push(p("attn.w_k"), G::Attention, uniform_matrix(rng, d, d), true);
        let w_v = b.push(p("attn.w_v"), G::Attention, uniform_matrix(rng, d, d), true);
        let w_o = b.push(p("attn.w_o"), G::Attention, uniform_matrix(rng, d, d), true);
        let (mut gate, mut group_norm, mut lambdas) = (None, None, None);
        if cfg.variant != Variant::Vanilla {
            let dh = d / (2 * cfg.heads);
            if cfg.variant == Variant::Dgsa {
                gate = Some((
                    b.push(p("attn.w_g"), G::Gate, Tensor::zeros(vec![d, cfg.heads]), true),
                    b.push(p("attn.b_g"), G::Gate, Tensor::zeros(vec![cfg.heads]), false),
                ));
            } else {
                lambdas = Some([
                    b.push(p("attn.lambda_q1"), G::Lambda, lambda_vector(rng, dh), true),
                    b.push(p("attn.lambda_k1"), G::Lambda, lambda_vector(rng, dh), true),
                    b.push(p("attn.lambda_q2"), G::Lambda, lambda_vector(rng, dh), true),
                    b.push(p("attn.lambda_k2"), G::Lambda, lambda_vector(rng, dh), true),
                ]);
            }
            group_norm = Some(b.push(p("attn.group_norm"), G::GroupNorm, Tensor::filled(vec![2 * dh], 1.0), false));
        }
        let ffn_norm = b.push(p("ffn_norm"), G::Norm, Tensor::filled(vec![d], 1.0), false);
        let up_width = match cfg.ffn_activation {
            Activation::SwiGlu => 2 * m,
            Activation::Gelu => m,
        };
        let up = b.push(p("ffn.up"), G::Ffn, uniform_matrix(rng, d, up_width), true);
        let down = b.push(p("ffn.down"), G::Ffn, uniform_matrix(rng, m, d), true);
        layers.push(LayerIndex {
            attn_norm,
            w_q,
            w_k,
            w_v,
            w_o,
            gate,
            group_norm,
            lambdas,
            ffn_norm,
            up,
            down,
            lambda_init,
        });
    }
    let final_norm = b.push("final_norm".into(), G::Norm, Tensor::filled(vec![d], 1.0), false);
    let head_w = b.push("head.w".into(), G::Head, uniform_matrix(rng, d, cfg.n_classes), true);
    let head_b = b.push("head.b".into(), G::Head, Tensor::zeros(vec![cfg.n_classes]), false);

    Ok(Model {
        cfg: cfg.clone(),
        params: b.params,
        index: Index {
            embed,
            layers,
            final_norm,
            head_w,
            head_b,
        },
    })
}

/// Closed-form learnable scalar count of the model `cfg` describes.
pub fn param_formula(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let h = cfg.heads;
    let m = cfg.ffn_hidden();
    let embed = match cfg.task {
        Task::Text {
            vocab_size,
            max_seq_len,
        } => (vocab_size + max_seq_len) * d,
        Task::Vision {
            image_size,
            patch_size,
            channels,
        } => {
            let n = (image_size / patch_size).pow(2);
            channels * patch_size * patch_size * d + d + d + (n + 1) * d
        }
    };
    let dh = d / (2 * h);
    let attn_extra = match cfg.variant {
        Variant::Vanilla => 0,
        Variant::Diff => 4 * dh + 2 * dh,
        Variant::Dgsa => d * h + h + 2 * dh,
    };
    let ffn = match cfg.ffn_activation {
        Activation::SwiGlu => 3 * d * m,
        Activation::Gelu => 2 * d * m,
    };
    let layer = 2 * d + 4 * d * d + attn_extra + ffn;
    embed + cfg.depth * layer + d + d * cfg.n_classes + cfg.n_classes
}

/// Output of one batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `B×n_classes`.
    pub logits: Var,
    /// Per sample, per layer; empty unless capture was requested.
    pub maps: Vec<Vec<AttentionMaps>>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn count_params(&self) -> ParamCount {
        let mut by_group = BTreeMap::new();
        for p in &self.params {
            *by_group.entry(p.group).or_insert(0) += p.value.numel();
        }
        ParamCount {
            total: by_group.values().sum(),
            by_group,
        }
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn snap_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Replaces all parameter values; shapes must match declaration order.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Data(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim("set_params", p.value.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Records every parameter as a trainable leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    fn embed(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, i: usize) -> Result<Var> {
        match (&self.index.embed, &self.cfg.task, &batch.inputs) {
            (EmbedIndex::Text { tokens, pos }, Task::Text { vocab_size, max_seq_len }, Inputs::Tokens { .. }) => {
                let row = batch.inputs.tokens(i).expect("token input");
                let (mut ids, mut at) = (Vec::new(), Vec::new());
                for (p, &t) in row.iter().enumerate() {
                    if t == PAD {
                        continue;
                    }
                    if t >= *vocab_size {
                        return Err(Error::Data(format!("token id {t} >= vocab_size {vocab_size}")));
                    }
                    if p >= *max_seq_len {
                        return Err(Error::Data(format!(
                            "token at position {p} exceeds max_seq_len {max_seq_len}"
                        )));
                    }
                    ids.push(t);
                    at.push(p);
                }
                if ids.is_empty() {
                    return Err(Error::Data(format!("sample {i} has only padding")));
                }
                let e = tape.gather_rows(vars[*tokens], &ids)?;
                let p = tape.gather_rows(vars[*pos], &at)?;
                tape.add(e, p)
            }
            (
                EmbedIndex::Vision {
                    patch_w,
                    patch_b,
                    cls,
                    pos,
                },
                Task::Vision {
                    image_size,
                    patch_size,
                    channels,
                },
                Inputs::Images(_),
            ) => {
                let img = batch.inputs.image(i).expect("image input");
                if img.shape() != [*channels, *image_size, *image_size] {
                    return Err(Error::dim("image input", img.shape(), &[*channels, *image_size, *image_size]));
                }
                let patches = tape.constant(patchify(&img, *patch_size)?);
                let x = tape.matmul(patches, vars[*patch_w])?;
                let x = tape.add_row_bias(x, vars[*patch_b])?;
                let x = tape.concat_rows(&[vars[*cls], x])?;
                tape.add(x, vars[*pos])
            }
            _ => Err(Error::Data(format!(
                "batch inputs do not match the {} model",
                self.cfg.task_name()
            ))),
        }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        l: &LayerIndex,
        x: Var,
    ) -> Result<(Var, AttentionMaps)> {
        let av = AttentionVars {
            w_q: vars[l.w_q],
            w_k: vars[l.w_k],
            w_v: vars[l.w_v],
            w_o: vars[l.w_o],
            gate: l.gate.map(|(w, b)| (vars[w], vars[b])),
            norm_gain: l.group_norm.map(|g| vars[g]),
            lambdas: l.lambdas.map(|ix| ix.map(|j| vars[j])),
            lambda_init: l.lambda_init,
        };
        let res = self.cfg.attn_residual;
        match self.cfg.variant {
            Variant::Vanilla => vanilla_mha_forward(tape, x, &av, self.cfg.heads, res),
            Variant::Diff => {
                let layout = HeadLayout::new(self.cfg.d_model, self.cfg.heads)?;
                diff_attn_forward(tape, x, &av, &layout, res)
            }
            Variant::Dgsa => {
                let layout = HeadLayout::new(self.cfg.d_model, self.cfg.heads)?;
                mdgsa_forward(tape, x, &av, &layout, l.lambda_init, res)
            }
        }
    }

    /// Final-normed token states (`N×d`) of sample `i`, with the attention
    /// maps of every layer when `capture` is set.
    pub fn encode_sample(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        i: usize,
        mut rng: Option<&mut Rng>,
        capture: bool,
    ) -> Result<(Var, Vec<AttentionMaps>)> {
        let drop = FfnDropout {
            p: self.cfg.dropout,
            layers: self.cfg.n_dropout,
        };
        let mut x = self.embed(tape, vars, batch, i)?;
        let mut maps = Vec::new();
        for l in &self.index.layers {
            let h = tape.rmsnorm(x, vars[l.attn_norm], NORM_EPS)?;
            let (a, m) = self.attention(tape, vars, l, h)?;
            x = tape.add(x, a)?;
            let h = tape.rmsnorm(x, vars[l.ffn_norm], NORM_EPS)?;
            let f = match self.cfg.ffn_activation {
                Activation::SwiGlu => swiglu_ffn(tape, h, vars[l.up], vars[l.down], drop, rng.as_deref_mut())?,
                Activation::Gelu => gelu_ffn(tape, h, vars[l.up], vars[l.down], drop, rng.as_deref_mut())?,
            };
            x = tape.add(x, f)?;
            if capture {
                maps.push(m);
            }
        }
        Ok((tape.rmsnorm(x, vars[self.index.final_norm], NORM_EPS)?, maps))
    }

    /// Pools final token states (mean for text, class-token row for vision)
    /// and applies the classifier: `1×n_classes`.
    pub fn classify(&self, tape: &mut Tape, vars: &[Var], states: Var) -> Result<Var> {
        let pooled = match self.cfg.task {
            Task::Text { .. } => tape.mean_rows(states)?,
            Task::Vision { .. } => tape.slice_rows(states, 0, 1)?,
        };
        let z = tape.matmul(pooled, vars[self.index.head_w])?;
        tape.add_row_bias(z, vars[self.index.head_b])
    }

    /// Runs the batch through the model on `tape`. `rng` switches dropout on;
    /// `capture` keeps each layer's attention maps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        mut rng: Option<&mut Rng>,
        capture: bool,
    ) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::Usage("parameter handles do not match the model".into()));
        }
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        let mut all_maps = Vec::new();
        for i in 0..batch.len() {
            let (h, maps) = self.encode_sample(tape, vars, batch, i, rng.as_deref_mut(), capture)?;
            rows.push(self.classify(tape, vars, h)?);
            if capture {
                all_maps.push(maps);
            }
        }
        let logits = tape.concat_rows(&rows)?;
        Ok(Forward {
            logits,
            maps: all_maps,
        })
    }

    /// Eval-mode logits, `B×n_classes`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = self.forward(&mut tape, &vars, batch, None, false)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Eval-mode attention maps of every layer for each sample.
    pub fn attention_maps(&self, batch: &Batch) -> Result<Vec<Vec<AttentionMaps>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        Ok(self.forward(&mut tape, &vars, batch, None, true)?.maps)
    }
}

/// Eval-mode logits of `model` on `batch`.
pub fn model_forward(model: &Model, batch: &Batch) -> Result<Tensor> {
    model.logits(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::rng::seeded;

    fn text_batch(rows: &[Vec<usize>]) -> Batch {
        let seq_len = rows[0].len();
        Dataset::new(
            Inputs::Tokens {
                ids: rows.concat(),
                seq_len,
            },
            vec![0; rows.len()],
            4,
        )
        .unwrap()
    }

    #[test]
    fn zero_depth_is_rejected() {
        let cfg = ModelConfig {
            depth: 0,
            ..ModelConfig::text_tiny(Variant::Dgsa)
        };
        assert!(matches!(build_model(&cfg, &mut seeded(0, "m", 0)), Err(Error::Config(_))));
    }

    #[test]
    fn gate_depth_other_than_one_is_rejected() {
        for g in [0, 2, 3] {
            let cfg = ModelConfig {
                gate_layers: g,
                ..ModelConfig::text_tiny(Variant::Dgsa)
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::vision_tiny(Variant::Dgsa);
        let a = build_model(&cfg, &mut seeded(9, "m", 0)).unwrap();
        let b = build_model(&cfg, &mut seeded(9, "m", 0)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn counts_match_formula_for_all_variants() {
        for v in [Variant::Vanilla, Variant::Diff, Variant::Dgsa] {
            for cfg in [ModelConfig::text_tiny(v), ModelConfig::vision_tiny(v)] {
                let m = build_model(&cfg, &mut seeded(1, "m", 0)).unwrap();
                assert_eq!(m.count_params().total, param_formula(&cfg), "{cfg:?}");
            }
        }
    }

    #[test]
    fn padding_is_ignored() {
        let cfg = ModelConfig::text_tiny(Variant::Dgsa);
        let m = build_model(&cfg, &mut seeded(2, "m", 0)).unwrap();
        let a = m.logits(&text_batch(&[vec![5, 7, 9, 0, 0]])).unwrap();
        let b = m.logits(&text_batch(&[vec![5, 7, 9]])).unwrap();
        assert_eq!(a, b);
        assert!(matches!(m.logits(&text_batch(&[vec![0, 0]])), Err(Error::Data(_))));
        assert!(matches!(m.logits(&text_batch(&[vec![50]])), Err(Error::Data(_))));
    }

    #[test]
    fn canonical_text_is_sorted_and_hash_sensitive() {
        let a = ModelConfig::text_tiny(Variant::Dgsa);
        let keys: Vec<String> = a.canonical_pairs().into_iter().map(|(k, _)| k).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let b = ModelConfig { depth: 3, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
