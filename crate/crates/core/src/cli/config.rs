//! Flat `key=value` run configuration with a closed key set.
//!
//! Files hold one `key = value` per line; `#` starts a comment. Values equal
//! to `auto` are resolved from other keys (see [`SCHEMA`]). The canonical
//! form lists every key, resolved, sorted, one `key=value` per line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attention::AttnResidual;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig, Task, Variant};
use crate::train::{Schedule, TrainConfig};

/// Every accepted key with its default.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "0"),
    ("model.variant", "dgsa"),
    ("model.task", "text"),
    ("model.depth", "2"),
    ("model.d_model", "64"),
    ("model.heads", "4"),
    // auto: 4 for vanilla, 2 otherwise.
    ("model.ffn_expansion", "auto"),
    // auto: gelu for vanilla, swiglu otherwise.
    ("model.ffn_activation", "auto"),
    ("model.dropout", "0"),
    ("model.n_dropout", "1"),
    // auto: query for non-vanilla vision models, none otherwise.
    ("model.attn_residual", "auto"),
    ("model.n_classes", "4"),
    ("model.lambda_init", "schedule"),
    ("model.gate_layers", "1"),
    // auto: taken from the data (synthetic vocabulary or built vocabulary).
    ("model.vocab_size", "auto"),
    ("model.max_seq_len", "16"),
    ("model.image_size", "8"),
    ("model.patch_size", "2"),
    ("model.channels", "1"),
    ("train.epochs", "3"),
    ("train.batch_size", "32"),
    ("train.lr", "0.001"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("train.weight_decay", "0.01"),
    ("train.schedule", "cosine"),
    ("train.lr_min", "0"),
    ("train.warmup_steps", "0"),
    ("train.clip_norm", "1"),
    // auto: synth_text for text models, synth_vision for vision models.
    ("data.kind", "auto"),
    ("data.train_size", "512"),
    ("data.test_size", "256"),
    ("data.spurious_rate", "0"),
    ("data.sigma", "0"),
    ("data.signal_per_sample", "4"),
    ("data.confusers", "2"),
    ("data.signal_vocab", "16"),
    ("data.distractor_vocab", "32"),
    ("data.min_token_freq", "2"),
    ("data.max_vocab", "60000"),
    ("data.train_path", ""),
    ("data.test_path", ""),
    ("data.train_images", ""),
    ("data.train_labels", ""),
    ("data.test_images", ""),
    ("data.test_labels", ""),
    ("data.sweep", ""),
    ("out.dir", "out"),
    ("gradcheck.tol", "1e-4"),
    ("gradcheck.step", "1e-5"),
    ("gradcheck.d_model", "8"),
    ("gradcheck.depth", "2"),
    ("gradcheck.heads", "2"),
    ("gradcheck.seq_len", "4"),
    ("gradcheck.vocab_size", "12"),
    ("gradcheck.image_size", "4"),
    ("gradcheck.patch_size", "2"),
    ("gradcheck.batch", "2"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    SynthText,
    SynthVision,
    IdxImages,
    CsvText,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            DataKind::SynthText => "synth_text",
            DataKind::SynthVision => "synth_vision",
            DataKind::IdxImages => "idx_images",
            DataKind::CsvText => "csv_text",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "synth_text" => Some(DataKind::SynthText),
            "synth_vision" => Some(DataKind::SynthVision),
            "idx_images" => Some(DataKind::IdxImages),
            "csv_text" => Some(DataKind::CsvText),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub train_size: usize,
    pub test_size: usize,
    pub spurious_rate: f64,
    pub sigma: f64,
    pub signal_per_sample: usize,
    pub confusers: usize,
    pub signal_vocab: usize,
    pub distractor_vocab: usize,
    pub min_token_freq: usize,
    pub max_vocab: usize,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub sweep: Vec<f64>,
}

impl DataConfig {
    /// The noise level of this data kind (σ for images, rate for tokens).
    pub fn noise_level(&self) -> f64 {
        match self.kind {
            DataKind::SynthVision | DataKind::IdxImages => self.sigma,
            DataKind::SynthText | DataKind::CsvText => self.spurious_rate,
        }
    }

    pub fn noise_key(&self) -> &'static str {
        match self.kind {
            DataKind::SynthVision | DataKind::IdxImages => "data.sigma",
            DataKind::SynthText | DataKind::CsvText => "data.spurious_rate",
        }
    }

    /// Noise levels used by a bare `--sweep`.
    pub fn default_sweep(&self) -> Vec<f64> {
        match self.kind {
            DataKind::SynthVision | DataKind::IdxImages => vec![0.0, 0.1, 0.25, 0.5],
            DataKind::SynthText | DataKind::CsvText => vec![0.0, 0.1, 0.3, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub tol: f64,
    pub step: f64,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
    pub gradcheck: GradcheckConfig,
}

/// Parses `key = value` lines. Duplicate keys are an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim().to_string();
        if !seen.insert(k.clone()) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `--set key=value` argument.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn get<'a>(m: &'a BTreeMap<String, String>, k: &str) -> &'a str {
    m.get(k).map(String::as_str).unwrap_or("")
}

fn num<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
    let v = get(m, k);
    v.parse()
        .map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
}

/// Floats also accept a `p/q` fraction.
fn real(m: &BTreeMap<String, String>, k: &str) -> Result<f64> {
    let v = get(m, k);
    let bad = || Error::Config(format!("{k}: cannot parse {v:?} as a number"));
    let x = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => v.parse().map_err(|_| bad())?,
    };
    if !x.is_finite() {
        return Err(bad());
    }
    Ok(x)
}

fn auto(m: &mut BTreeMap<String, String>, k: &str, v: String) {
    if get(m, k) == "auto" {
        m.insert(k.to_string(), v);
    }
}

fn path(m: &BTreeMap<String, String>, k: &str) -> Option<PathBuf> {
    let v = get(m, k);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Defaults overlaid with `pairs` in order.
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut values: BTreeMap<String, String> =
            SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            if !values.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            values.insert(k, v);
        }
        Self::resolve(values)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Reads `file` (if any), then applies `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    /// Copy with `key` replaced.
    pub fn with(&self, key: &str, value: impl Into<String>) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = self.values.clone().into_iter().collect();
        pairs.push((key.to_string(), value.into()));
        Self::from_pairs(pairs)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Sorted `key=value` lines of every resolved key.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn resolve(mut m: BTreeMap<String, String>) -> Result<Self> {
        let variant = Variant::parse(get(&m, "model.variant"))
            .ok_or_else(|| Error::Config(format!("model.variant: unknown {:?}", get(&m, "model.variant"))))?;
        let vision = match get(&m, "model.task") {
            "text" => false,
            "vision" => true,
            other => return Err(Error::Config(format!("model.task: unknown {other:?}"))),
        };
        let vanilla = variant == Variant::Vanilla;
        auto(&mut m, "model.ffn_expansion", if vanilla { "4" } else { "2" }.into());
        auto(&mut m, "model.ffn_activation", if vanilla { "gelu" } else { "swiglu" }.into());
        auto(&mut m, "model.attn_residual",
            if vision && !vanilla { "query" } else { "none" }.into(),
        );
        auto(&mut m, "data.kind", if vision { "synth_vision" } else { "synth_text" }.into());
        let kind = DataKind::parse(get(&m, "data.kind"))
            .ok_or_else(|| Error::Config(format!("data.kind: unknown {:?}", get(&m, "data.kind"))))?;
        if kind == DataKind::SynthText {
            let v = 2 + num::<usize>(&m, "data.signal_vocab")? + num::<usize>(&m, "data.distractor_vocab")?;
            auto(&mut m, "model.vocab_size", v.to_string());
        }

        let data = DataConfig {
            kind,
            train_size: num(&m, "data.train_size")?,
            test_size: num(&m, "data.test_size")?,
            spurious_rate: real(&m, "data.spurious_rate")?,
            sigma: real(&m, "data.sigma")?,
            signal_per_sample: num(&m, "data.signal_per_sample")?,
            confusers: num(&m, "data.confusers")?,
            signal_vocab: num(&m, "data.signal_vocab")?,
            distractor_vocab: num(&m, "data.distractor_vocab")?,
            min_token_freq: num(&m, "data.min_token_freq")?,
            max_vocab: num(&m, "data.max_vocab")?,
            train_path: path(&m, "data.train_path"),
            test_path: path(&m, "data.test_path"),
            train_images: path(&m, "data.train_images"),
            train_labels: path(&m, "data.train_labels"),
            test_images: path(&m, "data.test_images"),
            test_labels: path(&m, "data.test_labels"),
            sweep: {
                let s = get(&m, "data.sweep");
                if s.is_empty() {
                    Vec::new()
                } else {
                    s.split(',')
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::Config(format!("data.sweep: cannot parse {v:?}")))
                        })
                        .collect::<Result<_>>()?
                }
            },
        };
        if data.sigma < 0.0 {
            return Err(Error::Config(format!("data.sigma {} must be >= 0", data.sigma)));
        }
        if !(0.0..1.0).contains(&data.spurious_rate) {
            return Err(Error::Config(format!("data.spurious_rate {} outside [0, 1)", data.spurious_rate)));
        }
        if data.train_size == 0 || data.test_size == 0 {
            return Err(Error::Config("data sizes must be > 0".into()));
        }

        // vocab_size may stay "auto" until text data is loaded.
        let vocab_size = match get(&m, "model.vocab_size") {
            "auto" => 0,
            _ => num(&m, "model.vocab_size")?,
        };
        let task = if vision {
            Task::Vision {
                image_size: num(&m, "model.image_size")?,
                patch_size: num(&m, "model.patch_size")?,
                channels: num(&m, "model.channels")?,
            }
        } else {
            Task::Text {
                vocab_size,
                max_seq_len: num(&m, "model.max_seq_len")?,
            }
        };
        let model = ModelConfig {
            variant,
            task,
            depth: num(&m, "model.depth")?,
            d_model: num(&m, "model.d_model")?,
            heads: num(&m, "model.heads")?,
            ffn_expansion: real(&m, "model.ffn_expansion")?,
            ffn_activation: Activation::parse(get(&m, "model.ffn_activation")).ok_or_else(|| {
                Error::Config(format!("model.ffn_activation: unknown {:?}", get(&m, "model.ffn_activation")))
            })?,
            dropout: real(&m, "model.dropout")?,
            n_dropout: num(&m, "model.n_dropout")?,
            attn_residual: AttnResidual::parse(get(&m, "model.attn_residual")).ok_or_else(|| {
                Error::Config(format!("model.attn_residual: unknown {:?}", get(&m, "model.attn_residual")))
            })?,
            n_classes: num(&m, "model.n_classes")?,
            lambda_init: match get(&m, "model.lambda_init") {
                "schedule" => None,
                _ => Some(real(&m, "model.lambda_init")?),
            },
            gate_layers: num(&m, "model.gate_layers")?,
        };
        if vocab_size > 0 || vision {
            model.validate()?;
        }

        let schedule = match get(&m, "train.schedule") {
            "cosine" => Schedule::Cosine {
                lr_min: real(&m, "train.lr_min")?,
            },
            "warmup_linear" => Schedule::WarmupLinear {
                warmup: num(&m, "train.warmup_steps")?,
            },
            "constant" => Schedule::Constant,
            other => return Err(Error::Config(format!("train.schedule: unknown {other:?}"))),
        };
        let seed: u64 = num(&m, "seed")?;
        let train = TrainConfig {
            epochs: num(&m, "train.epochs")?,
            batch_size: num(&m, "train.batch_size")?,
            lr: real(&m, "train.lr")?,
            beta1: real(&m, "train.beta1")?,
            beta2: real(&m, "train.beta2")?,
            eps: real(&m, "train.eps")?,
            weight_decay: real(&m, "train.weight_decay")?,
            schedule,
            clip_norm: match get(&m, "train.clip_norm") {
                "none" => None,
                _ => Some(real(&m, "train.clip_norm")?),
            },
            seed,
        };
        train.validate()?;

        let gradcheck = GradcheckConfig {
            tol: real(&m, "gradcheck.tol")?,
            step: real(&m, "gradcheck.step")?,
            d_model: num(&m, "gradcheck.d_model")?,
            depth: num(&m, "gradcheck.depth")?,
            heads: num(&m, "gradcheck.heads")?,
            seq_len: num(&m, "gradcheck.seq_len")?,
            vocab_size: num(&m, "gradcheck.vocab_size")?,
            image_size: num(&m, "gradcheck.image_size")?,
            patch_size: num(&m, "gradcheck.patch_size")?,
            batch: num(&m, "gradcheck.batch")?,
        };
        let out_dir = PathBuf::from(get(&m, "out.dir"));
        Ok(Self {
            values: m,
            seed,
            model,
            train,
            data,
            out_dir,
            gradcheck,
        })
    }
}

/// Model keys whose values differ between two configs: `(key, a, b)`.
pub fn model_key_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<(String, String, String)> {
    let pa: BTreeMap<String, String> = a.canonical_pairs().into_iter().collect();
    let pb: BTreeMap<String, String> = b.canonical_pairs().into_iter().collect();
    let keys: std::collections::BTreeSet<&String> = pa.keys().chain(pb.keys()).collect();
    keys.into_iter()
        .filter(|k| pa.get(*k) != pb.get(*k))
        .map(|k| {
            let show = |m: &BTreeMap<String, String>| m.get(k).cloned().unwrap_or_else(|| "<absent>".into());
            (k.clone(), show(&pa), show(&pb))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::from_pairs(Vec::new()).unwrap();
        assert_eq!(c.model.variant, Variant::Dgsa);
        assert_eq!(c.model.ffn_activation, Activation::SwiGlu);
        assert_eq!(c.get("model.vocab_size"), Some("50"));
        assert_eq!(c.data.kind, DataKind::SynthText);
        assert_eq!(c.model.attn_residual, AttnResidual::None);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::from_text("model.detph = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config(m) if m.contains("model.detph")));
    }

    #[test]
    fn comments_overrides_and_fractions() {
        let c = RunConfig::from_text("# tiny\nmodel.ffn_expansion = 16/3  # canonical\nmodel.variant=diff\n").unwrap();
        assert_eq!(c.model.ffn_expansion, 16.0 / 3.0);
        assert_eq!(c.model.variant, Variant::Diff);
        let d = c.with("model.depth", "5").unwrap();
        assert_eq!(d.model.depth, 5);
        assert!(RunConfig::from_text("seed=1\nseed=2\n").is_err());
    }

    #[test]
    fn vision_defaults_use_query_residual() {
        let c = RunConfig::from_text("model.task=vision").unwrap();
        assert_eq!(c.model.attn_residual, AttnResidual::Query);
        assert_eq!(c.data.kind, DataKind::SynthVision);
        let v = RunConfig::from_text("model.task=vision\nmodel.variant=vanilla").unwrap();
        assert_eq!(v.model.attn_residual, AttnResidual::None);
        assert_eq!(v.model.ffn_expansion, 4.0);
    }

    #[test]
    fn canonical_round_trips() {
        let c = RunConfig::from_text("model.lambda_init=0.8\nseed=7").unwrap();
        let again = RunConfig::from_text(&c.canonical()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            "data.sigma=-0.5",
            "model.gate_layers=2",
            "model.lambda_init=1.5",
            "train.beta1=1",
            "model.depth=0",
            "model.heads=3",
            "train.schedule=step",
        ] {
            assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn diff_lists_changed_model_keys() {
        let a = RunConfig::from_text("").unwrap();
        let b = RunConfig::from_text("model.depth=3\ntrain.lr=0.1").unwrap();
        let d = model_key_diff(&a.model, &b.model);
        assert_eq!(d, vec![("model.depth".into(), "2".into(), "3".into())]);
    }
}
