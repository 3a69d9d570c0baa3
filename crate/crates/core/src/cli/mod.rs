//! Command implementations behind the `dgsa` binary. Each command writes its
//! report to the given writer and returns a typed outcome; errors map onto
//! exit codes through [`Error::exit_code`].

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;

pub use config::{model_key_diff, parse_override, DataConfig, DataKind, GradcheckConfig, RunConfig, SCHEMA};

use crate::data::{
    inject_gaussian_noise, inject_spurious_tokens, load_idx_dataset, load_tsv, oracle_accuracy,
    synth_patch_task, synth_token_task, Dataset, IdxArray, Inputs, PatchTaskSpec, TokenTaskSpec, Vocab,
    PAD,
};
use crate::error::{Error, Result};
use crate::model::{build_model, read_checkpoint, write_checkpoint, Model, ModelConfig, ParamGroup, Task};
use crate::rng::seeded;
use crate::rollout::{class_token_grid, export_heatmap, export_signed, HeatmapFormat, RolloutMap};
use crate::tensor::{gradcheck, GradcheckOptions, OpKind, Tape, Tensor};
use crate::train::{evaluate, fit, EpochReport, EvalReport, MetricsLog};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?} (train|test)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Flag overrides applied after the config file, in this order.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut p = self.sets.clone();
        if let Some(s) = self.seed {
            p.push(("seed".into(), s.to_string()));
        }
        if let Some(o) = &self.out {
            p.push(("out.dir".into(), o.display().to_string()));
        }
        p
    }
}

pub fn load_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    RunConfig::load(file, &overrides.pairs())
}

/// Both splits of the configured data, with `vocab_size` resolved.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub config: RunConfig,
    pub train: Dataset,
    pub test: Dataset,
    /// Generating spec of the synthetic token task, for its oracle.
    pub token_spec: Option<TokenTaskSpec>,
    pub vocab: Option<Vocab>,
}

impl LoadedData {
    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Analytic oracle accuracy where the data has one.
    pub fn oracle(&self, s: Split) -> Result<Option<f64>> {
        match self.config.data.kind {
            DataKind::SynthText | DataKind::SynthVision => {
                oracle_accuracy(self.split(s), self.token_spec.as_ref()).map(Some)
            }
            DataKind::IdxImages | DataKind::CsvText => Ok(None),
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("{key} must be set for this data.kind")))
}

fn token_spec(cfg: &RunConfig, size: usize, rate: f64) -> Result<TokenTaskSpec> {
    let Task::Text { max_seq_len, .. } = cfg.model.task else {
        return Err(Error::Config("data.kind synth_text needs model.task=text".into()));
    };
    Ok(TokenTaskSpec {
        size,
        n_classes: cfg.model.n_classes,
        seq_len: max_seq_len,
        signal_per_sample: cfg.data.signal_per_sample,
        confusers: cfg.data.confusers,
        signal_vocab: cfg.data.signal_vocab,
        distractor_vocab: cfg.data.distractor_vocab,
        spurious_rate: rate,
    })
}

fn patch_spec(cfg: &RunConfig, size: usize, sigma: f64) -> Result<PatchTaskSpec> {
    let Task::Vision {
        image_size, channels, ..
    } = cfg.model.task
    else {
        return Err(Error::Config("data.kind synth_vision needs model.task=vision".into()));
    };
    Ok(PatchTaskSpec {
        size,
        n_classes: cfg.model.n_classes,
        image_size,
        channels,
        sigma,
    })
}

/// Loads or generates both splits. `noise` replaces the configured noise
/// level: synthetic data is regenerated at that level, loaded data gets it
/// injected.
pub fn load_data(cfg: &RunConfig, noise: Option<f64>) -> Result<LoadedData> {
    let d = &cfg.data;
    let level = noise.unwrap_or(d.noise_level());
    let split_rng = |s: &str| seeded(cfg.seed, s, 0);
    let mut out = match d.kind {
        DataKind::SynthText => {
            let tr = token_spec(cfg, d.train_size, level)?;
            let te = token_spec(cfg, d.test_size, level)?;
            LoadedData {
                config: cfg.clone(),
                train: synth_token_task(&tr, &mut split_rng("data-train"))?,
                test: synth_token_task(&te, &mut split_rng("data-test"))?,
                token_spec: Some(te),
                vocab: None,
            }
        }
        DataKind::SynthVision => LoadedData {
            config: cfg.clone(),
            train: synth_patch_task(&patch_spec(cfg, d.train_size, level)?, &mut split_rng("data-train"))?,
            test: synth_patch_task(&patch_spec(cfg, d.test_size, level)?, &mut split_rng("data-test"))?,
            token_spec: None,
            vocab: None,
        },
        DataKind::IdxImages => {
            let n = cfg.model.n_classes;
            let mut train = load_idx_dataset(
                required(&d.train_images, "data.train_images")?,
                required(&d.train_labels, "data.train_labels")?,
                n,
            )?;
            let mut test = load_idx_dataset(
                required(&d.test_images, "data.test_images")?,
                required(&d.test_labels, "data.test_labels")?,
                n,
            )?;
            for (set, stream) in [(&mut train, "noise-train"), (&mut test, "noise-test")] {
                if level > 0.0 {
                    let Inputs::Images(x) = &set.inputs else { unreachable!() };
                    set.inputs = Inputs::Images(inject_gaussian_noise(x, level, &mut split_rng(stream))?);
                }
                set.noise = vec![level; set.len()];
            }
            LoadedData {
                config: cfg.clone(),
                train,
                test,
                token_spec: None,
                vocab: None,
            }
        }
        DataKind::CsvText => {
            let Task::Text { max_seq_len, .. } = cfg.model.task else {
                return Err(Error::Config("data.kind csv_text needs model.task=text".into()));
            };
            let n = cfg.model.n_classes;
            let max_vocab = Some(d.max_vocab);
            let (mut train, vocab) = load_tsv(
                required(&d.train_path, "data.train_path")?,
                n,
                max_seq_len,
                None,
                d.min_token_freq,
                max_vocab,
            )?;
            let (mut test, _) = load_tsv(
                required(&d.test_path, "data.test_path")?,
                n,
                max_seq_len,
                Some(&vocab),
                d.min_token_freq,
                max_vocab,
            )?;
            for (set, stream) in [(&mut train, "noise-train"), (&mut test, "noise-test")] {
                if level > 0.0 && vocab.len() > 2 {
                    let Inputs::Tokens { ids, .. } = &mut set.inputs else { unreachable!() };
                    let mut rng = split_rng(stream);
                    let mut noisy = ids.clone();
                    inject_spurious_tokens(&mut noisy, level, 2..vocab.len(), &mut rng)?;
                    // Padding stays padding.
                    for (n, o) in noisy.iter_mut().zip(ids.iter()) {
                        if *o == PAD {
                            *n = PAD;
                        }
                    }
                    *ids = noisy;
                }
                set.noise = vec![level; set.len()];
            }
            let config = match cfg.get("model.vocab_size") {
                Some("auto") => cfg.with("model.vocab_size", vocab.len().to_string())?,
                _ => {
                    if let Task::Text { vocab_size, .. } = cfg.model.task {
                        if vocab_size < vocab.len() {
                            return Err(Error::Config(format!(
                                "model.vocab_size {vocab_size} is smaller than the built vocabulary ({})",
                                vocab.len()
                            )));
                        }
                    }
                    cfg.clone()
                }
            };
            LoadedData {
                config,
                train,
                test,
                token_spec: None,
                vocab: Some(vocab),
            }
        }
    };
    out.config.model.validate()?;
    if noise.is_some() {
        out.config = out.config.with(d.noise_key(), level.to_string())?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochReport>,
    /// Evaluation of the final (checkpoint-precision) model.
    pub train: EvalReport,
    pub test: EvalReport,
    pub oracle: Option<f64>,
}

/// Builds, trains and evaluates a model; no files are written unless `log`
/// is given.
pub fn train_and_evaluate(data: &LoadedData, log: Option<&mut MetricsLog>) -> Result<(Model, TrainOutcome)> {
    let cfg = &data.config;
    let mut model = build_model(&cfg.model, &mut seeded(cfg.seed, "init", 0))?;
    let epochs = fit(&mut model, &data.train, &cfg.train, log)?;
    let outcome = TrainOutcome {
        epochs,
        train: evaluate(&model, &data.train)?,
        test: evaluate(&model, &data.test)?,
        oracle: data.oracle(Split::Test)?,
    };
    Ok((model, outcome))
}

fn write_report(out: &mut dyn Write, split: &str, r: &EvalReport) -> Result<()> {
    let mut s = format!("{split} n={} accuracy={:?} loss={:?}\n", r.n, r.accuracy, r.mean_loss);
    for (c, a) in r.per_class.iter().enumerate() {
        match a {
            Some(a) => s.push_str(&format!("  class {c}: {a:?}\n")),
            None => s.push_str(&format!("  class {c}: -\n")),
        }
    }
    emit(out, &s)
}

fn emit(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// `train`: fits a model and writes `metrics.csv` and `model.ckpt` into
/// `out.dir`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainOutcome> {
    let data = load_data(cfg, None)?;
    let dir = &data.config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join(METRICS_FILE);
    let mut log = MetricsLog::create(&metrics)?;
    let (model, outcome) = train_and_evaluate(&data, Some(&mut log))?;
    for e in &outcome.epochs {
        emit(out, &format!("epoch {} loss={:?} acc={:?}\n", e.epoch, e.mean_loss, e.accuracy))?;
    }
    let ckpt = dir.join(CHECKPOINT_FILE);
    write_checkpoint(&ckpt, &model, &data.config.canonical())?;
    emit(out, &format!("params {}\n", model.count_params().total))?;
    write_report(out, "final train", &outcome.train)?;
    write_report(out, "test", &outcome.test)?;
    if let Some(o) = outcome.oracle {
        emit(out, &format!("oracle test accuracy={o:?}\n"))?;
    }
    emit(out, &format!("wrote {}\nwrote {}\n", metrics.display(), ckpt.display()))?;
    Ok(outcome)
}

/// Resolves the run config of a checkpoint command and loads the model.
/// Without `file` the configuration stored in the checkpoint is used;
/// overrides apply on top either way. Model keys must hash to the stored
/// hash.
pub fn load_trained(checkpoint: &Path, file: Option<&Path>, overrides: &Overrides) -> Result<(Model, LoadedData)> {
    let ckpt = read_checkpoint(checkpoint)?;
    let stored = RunConfig::from_text(&ckpt.config_text)
        .map_err(|e| Error::Data(format!("{}: stored config is invalid: {e}", checkpoint.display())))?;
    let cfg = match file {
        Some(f) => load_config(Some(f), overrides)?,
        None => RunConfig::from_pairs(
            config::parse_pairs(&ckpt.config_text)?
                .into_iter()
                .chain(overrides.pairs()),
        )?,
    };
    let data = load_data(&cfg, None)?;
    let want = data.config.model.hash();
    if want != ckpt.model_hash {
        let diff: Vec<String> = model_key_diff(&stored.model, &data.config.model)
            .into_iter()
            .map(|(k, a, b)| format!("{k}: {a} (checkpoint) vs {b} (config)"))
            .collect();
        return Err(Error::Config(format!(
            "checkpoint/config mismatch: checkpoint model hash {} vs config model hash {}; differing keys: {}",
            hex::encode(ckpt.model_hash),
            hex::encode(want),
            if diff.is_empty() { "none".to_string() } else { diff.join(", ") }
        )));
    }
    let mut model = build_model(&data.config.model, &mut seeded(data.config.seed, "init", 0))?;
    model.load_checkpoint(&ckpt)?;
    Ok((model, data))
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub level: f64,
    pub report: EvalReport,
    pub oracle: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub sweep: Vec<SweepRow>,
}

/// `eval`: reports accuracy, loss and per-class accuracy on one split and,
/// with `sweep` levels, one row per noise level. An empty `sweep` selects
/// the data kind's default grid.
pub fn cmd_eval(
    checkpoint: &Path,
    file: Option<&Path>,
    overrides: &Overrides,
    split: Split,
    sweep: Option<&[f64]>,
    out: &mut dyn Write,
) -> Result<EvalOutcome> {
    let (model, data) = load_trained(checkpoint, file, overrides)?;
    let report = evaluate(&model, data.split(split))?;
    write_report(out, split.name(), &report)?;
    let levels = match sweep {
        Some([]) => data.config.data.default_sweep(),
        Some(l) => l.to_vec(),
        None => data.config.data.sweep.clone(),
    };
    let mut rows = Vec::with_capacity(levels.len());
    if !levels.is_empty() {
        let key = data.config.data.noise_key();
        emit(out, &format!("sweep {key} split={}\nlevel,accuracy,loss,oracle\n", split.name()))?;
    }
    for level in levels {
        let noisy = load_data(&data.config, Some(level))?;
        let r = evaluate(&model, noisy.split(split))?;
        let oracle = noisy.oracle(split)?;
        emit(
            out,
            &format!(
                "{level:?},{:?},{:?},{}\n",
                r.accuracy,
                r.mean_loss,
                oracle.map_or_else(|| "-".to_string(), |o| format!("{o:?}"))
            ),
        )?;
        rows.push(SweepRow {
            level,
            report: r,
            oracle,
        });
    }
    Ok(EvalOutcome { report, sweep: rows })
}

/// Architecture of the gradient-check instance: the configured variant,
/// task, feed-forward and attention switches at the `gradcheck.*` sizes,
/// without dropout.
pub fn gradcheck_model_config(cfg: &RunConfig) -> ModelConfig {
    let g = &cfg.gradcheck;
    let task = match cfg.model.task {
        Task::Text { .. } => Task::Text {
            vocab_size: g.vocab_size,
            max_seq_len: g.seq_len,
        },
        Task::Vision { channels, .. } => Task::Vision {
            image_size: g.image_size,
            patch_size: g.patch_size,
            channels,
        },
    };
    ModelConfig {
        task,
        depth: g.depth,
        d_model: g.d_model,
        heads: g.heads,
        dropout: 0.0,
        ..cfg.model.clone()
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    /// Maximum relative error per parameter group, in group order.
    pub groups: Vec<(ParamGroup, f64)>,
    pub tol: f64,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, e)| *e < self.tol)
    }
}

/// `gradcheck`: finite-difference check of every parameter of a small
/// perturbed model under cross-entropy loss. Fails with [`Error::Check`]
/// unless every group is below the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<OpKind>, out: &mut dyn Write) -> Result<GradcheckOutcome> {
    let g = &cfg.gradcheck;
    if g.batch == 0 {
        return Err(Error::Config("gradcheck.batch must be > 0".into()));
    }
    let mcfg = gradcheck_model_config(cfg);
    let mut model = build_model(&mcfg, &mut seeded(cfg.seed, "gradcheck-init", 0))?;
    // Moves zero-initialized gates and unit gains off their special values.
    let mut rng = seeded(cfg.seed, "gradcheck-perturb", 0);
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let labels: Vec<usize> = (0..g.batch).map(|_| rng.random_range(0..mcfg.n_classes)).collect();
    let inputs = match mcfg.task {
        Task::Text {
            vocab_size,
            max_seq_len,
        } => {
            if vocab_size < 3 {
                return Err(Error::Config("gradcheck.vocab_size must be >= 3".into()));
            }
            Inputs::Tokens {
                ids: (0..g.batch * max_seq_len).map(|_| rng.random_range(2..vocab_size)).collect(),
                seq_len: max_seq_len,
            }
        }
        Task::Vision {
            image_size, channels, ..
        } => {
            let n = g.batch * channels * image_size * image_size;
            Inputs::Images(Tensor::new(
                vec![g.batch, channels, image_size, image_size],
                (0..n).map(|_| rng.random::<f64>()).collect(),
            )?)
        }
    };
    let batch = Dataset::new(inputs, labels, mcfg.n_classes)?;
    let leaves: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let opts = GradcheckOptions {
        step: g.step,
        tol: g.tol,
        fault,
        ..Default::default()
    };
    let f = |tape: &mut Tape, vars: &[crate::tensor::Var]| {
        let fw = model.forward(tape, vars, &batch, None, false)?;
        tape.cross_entropy(fw.logits, &batch.labels)
    };
    let report = gradcheck(f, &leaves, &opts)?;
    let mut groups: Vec<(ParamGroup, f64)> = Vec::new();
    for (leaf, p) in report.leaves.iter().zip(model.params()) {
        match groups.iter_mut().find(|(gr, _)| *gr == p.group) {
            Some((_, e)) => *e = e.max(leaf.max_rel_err),
            None => groups.push((p.group, leaf.max_rel_err)),
        }
    }
    groups.sort_by_key(|(gr, _)| *gr);
    emit(
        out,
        &format!(
            "gradcheck {} {} d_model={} depth={} heads={} params={} tol={:e}\n",
            mcfg.variant.name(),
            mcfg.task_name(),
            mcfg.d_model,
            mcfg.depth,
            mcfg.heads,
            model.count_params().total,
            g.tol
        ),
    )?;
    for (gr, e) in &groups {
        let mark = if *e < g.tol { "ok" } else { "FAIL" };
        emit(out, &format!("{:<17} {e:.3e} {mark}\n", gr.name()))?;
    }
    let outcome = GradcheckOutcome { groups, tol: g.tol };
    if !outcome.passed() {
        let worst = outcome.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        return Err(Error::Check(format!(
            "max relative error {worst:e} is not below tolerance {:e}",
            g.tol
        )));
    }
    emit(out, "gradcheck passed\n")?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct RolloutOutcome {
    pub map: RolloutMap,
    pub files: Vec<PathBuf>,
}

/// `rollout`: one eval-mode forward pass on sample `index` of `split`,
/// writing each layer's signed head-averaged map (`layer_<l>.csv` plus
/// positive/negative PGMs), the rollout (`rollout.csv`, `rollout.pgm`),
/// axis labels, and for vision the class-token grid.
pub fn cmd_rollout(
    checkpoint: &Path,
    file: Option<&Path>,
    overrides: &Overrides,
    split: Split,
    index: usize,
    out: &mut dyn Write,
) -> Result<RolloutOutcome> {
    let (model, data) = load_trained(checkpoint, file, overrides)?;
    let set = data.split(split);
    if index >= set.len() {
        return Err(Error::Usage(format!(
            "sample {index} out of range for the {} split ({} samples)",
            split.name(),
            set.len()
        )));
    }
    let sample = set.select(&[index])?;
    let maps = model.attention_maps(&sample)?;
    let fused: Vec<Tensor> = maps[0].iter().map(|m| m.fused.clone()).collect();
    let labels = match &sample.inputs {
        Inputs::Tokens { .. } => {
            let row = sample.inputs.tokens(0).expect("token sample");
            row.iter()
                .enumerate()
                .filter(|(_, &t)| t != PAD)
                .map(|(p, &t)| {
                    let name = data
                        .vocab
                        .as_ref()
                        .and_then(|v| v.token(t))
                        .map_or_else(|| format!("t{t}"), str::to_string);
                    format!("{p}:{name}")
                })
                .collect()
        }
        Inputs::Images(_) => {
            let n = fused[0].shape()[1];
            let g = ((n - 1) as f64).sqrt().round() as usize;
            std::iter::once("cls".to_string())
                .chain((0..n - 1).map(|k| format!("p{}_{}", k / g.max(1), k % g.max(1))))
                .collect()
        }
    };
    let map = RolloutMap::from_fused(&fused, labels)?;
    let dir = &data.config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (l, a) in map.layers.iter().enumerate() {
        let stem = format!("layer_{}", l + 1);
        let p = dir.join(format!("{stem}.csv"));
        export_heatmap(a, &p, HeatmapFormat::Csv)?;
        files.push(p);
        files.extend(export_signed(a, dir, &stem, HeatmapFormat::Pgm)?);
    }
    for (name, fmt) in [("rollout.csv", HeatmapFormat::Csv), ("rollout.pgm", HeatmapFormat::Pgm)] {
        let p = dir.join(name);
        export_heatmap(&map.rollout, &p, fmt)?;
        files.push(p);
    }
    if matches!(model.config().task, Task::Vision { .. }) {
        let grid = class_token_grid(&map.rollout)?;
        for (name, fmt) in [("rollout_cls.csv", HeatmapFormat::Csv), ("rollout_cls.pgm", HeatmapFormat::Pgm)] {
            let p = dir.join(name);
            export_heatmap(&grid, &p, fmt)?;
            files.push(p);
        }
    }
    let lp = dir.join("labels.txt");
    let text: String = map.labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
    files.push(lp);
    emit(
        out,
        &format!(
            "rollout of {} sample {index} (label {}), {} layers\n",
            split.name(),
            sample.labels[0],
            map.layers.len()
        ),
    )?;
    for f in &files {
        emit(out, &format!("wrote {}\n", f.display()))?;
    }
    Ok(RolloutOutcome { map, files })
}

#[derive(Clone, Debug)]
pub struct SynthOutcome {
    pub train_oracle: f64,
    pub test_oracle: f64,
    pub files: Vec<PathBuf>,
}

fn tsv(d: &Dataset) -> String {
    let mut s = String::new();
    for i in 0..d.len() {
        let words: Vec<String> = d
            .inputs
            .tokens(i)
            .expect("token dataset")
            .iter()
            .filter(|&&t| t != PAD)
            .map(|t| format!("t{t}"))
            .collect();
        s.push_str(&format!("{}\t{}\n", d.labels[i], words.join(" ")));
    }
    s
}

/// `synth`: writes the configured synthetic task to `out.dir` (text as
/// `train.tsv`/`test.tsv`, images as IDX files) together with `oracle.txt`.
pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<SynthOutcome> {
    if !matches!(cfg.data.kind, DataKind::SynthText | DataKind::SynthVision) {
        return Err(Error::Config(format!(
            "synth needs a synthetic data.kind, got {}",
            cfg.data.kind.name()
        )));
    }
    let data = load_data(cfg, None)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        files.push(p);
        Ok(())
    };
    for (split, d) in [("train", &data.train), ("test", &data.test)] {
        match &d.inputs {
            Inputs::Tokens { .. } => put(&format!("{split}.tsv"), tsv(d).into_bytes())?,
            Inputs::Images(x) => {
                put(&format!("{split}-images.idx"), IdxArray::from_images(x)?.encode())?;
                let labels = IdxArray {
                    dims: vec![d.len()],
                    data: d.labels.iter().map(|&l| l as u8).collect(),
                };
                put(&format!("{split}-labels.idx"), labels.encode())?;
            }
        }
    }
    let train_oracle = data.oracle(Split::Train)?.expect("synthetic data has an oracle");
    let test_oracle = data.oracle(Split::Test)?.expect("synthetic data has an oracle");
    let report = format!(
        "kind={} noise={:?}\ntrain oracle accuracy={train_oracle:?}\ntest oracle accuracy={test_oracle:?}\n",
        cfg.data.kind.name(),
        cfg.data.noise_level()
    );
    put("oracle.txt", report.clone().into_bytes())?;
    emit(out, &report)?;
    for f in &files {
        emit(out, &format!("wrote {}\n", f.display()))?;
    }
    Ok(SynthOutcome {
        train_oracle,
        test_oracle,
        files,
    })
}
