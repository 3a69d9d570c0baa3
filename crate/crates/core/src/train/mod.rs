//! AdamW training loop with cosine or warmup-linear schedules, global-norm
//! clipping, and deterministic per-epoch shuffling.

mod metrics;

pub use metrics::{MetricsLog, METRICS_HEADER};

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::rng::seeded;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    Cosine { lr_min: f64 },
    WarmupLinear { warmup: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: Schedule::Cosine { lr_min: 0.0 },
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be >= 0", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} {b} outside (0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm {c} must be > 0"));
            }
        }
        if let Schedule::Cosine { lr_min } = self.schedule {
            if !(0.0..=self.lr).contains(&lr_min) {
                return bad(format!("lr_min {lr_min} outside [0, lr]"));
            }
        }
        Ok(())
    }

    /// Optimizer steps per epoch for `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Learning rate at 0-based global step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine { lr_min } => cosine_lr(step, total, self.lr, lr_min),
            Schedule::WarmupLinear { warmup } => warmup_linear_lr(step, warmup, total, self.lr),
        }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`, held at `lr_min`
/// past `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear ramp to `lr_max` over `warmup` steps, then linear decay reaching 0
/// at `total`.
pub fn warmup_linear_lr(step: usize, warmup: usize, total: usize, lr_max: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    let rest = total.saturating_sub(warmup).max(1) as f64;
    (lr_max * total.saturating_sub(step) as f64 / rest).max(0.0)
}

/// Scales all gradients by `max_norm / ‖g‖` when the global L2 norm exceeds
/// `max_norm`. Returns the factor applied.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let f = max_norm / norm;
    grads.iter_mut().flatten().for_each(|g| *g *= f);
    f
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments. Decoupled decay
/// `θ ← θ − lr·wd·θ` is skipped for parameters with `decay == false`.
pub fn adamw_step(
    params: &mut [Param],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Usage("gradient/state count does not match parameters".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "adamw",
                format!("non-finite gradient in {} at step {}", p.name, state.step),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        for (j, th) in p.value.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *th -= decay * *th;
            *th -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Forward, loss and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &Model,
    batch: &Dataset,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Vec<f64>>, usize)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let mut rng = dropout_seed.map(|s| seeded(s, "dropout", 0));
    let f = model.forward(&mut tape, &vars, batch, rng.as_mut(), false)?;
    let logits = tape.value(f.logits).clone();
    let loss = tape.cross_entropy(f.logits, &batch.labels)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec))
        .collect();
    let hits = (0..batch.len())
        .filter(|&i| argmax(logits.row(i)) == batch.labels[i])
        .count();
    Ok((loss_value, grads, hits))
}

/// One pass over `data` in a seeded shuffled order. `total_steps` sizes the
/// schedule; the global step index is `state.step`.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    epoch: usize,
    total_steps: usize,
    mut log: Option<&mut MetricsLog>,
) -> Result<EpochReport> {
    if data.is_empty() {
        return Err(Error::Usage("training on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded(cfg.seed, "shuffle", epoch as u64));
    let mut report = EpochReport {
        epoch,
        mean_loss: 0.0,
        accuracy: 0.0,
        lrs: Vec::new(),
        losses: Vec::new(),
    };
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let step = state.step as usize;
        let batch = data.select(chunk)?;
        let drop_seed = crate::rng::derive_seed(cfg.seed, "dropout", step as u64);
        let (loss, mut grads, h) = loss_and_grads(model, &batch, Some(drop_seed))?;
        if !loss.is_finite() {
            return Err(Error::numeric("train", format!("loss {loss} at step {step}")));
        }
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let lr = cfg.lr_at(step, total_steps);
        adamw_step(model.params_mut(), &grads, state, cfg, lr)?;
        loss_sum += loss * chunk.len() as f64;
        hits += h;
        report.lrs.push(lr);
        report.losses.push(loss);
        if let Some(log) = log.as_deref_mut() {
            log.append(step, epoch, lr, loss, h as f64 / chunk.len() as f64)?;
        }
    }
    report.mean_loss = loss_sum / data.len() as f64;
    report.accuracy = hits as f64 / data.len() as f64;
    Ok(report)
}

/// Runs `cfg.epochs` epochs from a fresh optimizer state, then rounds the
/// parameters to checkpoint precision.
pub fn fit(model: &mut Model, data: &Dataset, cfg: &TrainConfig, mut log: Option<&mut MetricsLog>) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    let total = cfg.epochs * cfg.steps_per_epoch(data.len());
    let mut state = OptimizerState::new(model.params());
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let r = train_epoch(model, data, cfg, &mut state, epoch, total, log.as_deref_mut())?;
        log::info!(
            "epoch {epoch}: loss {:.5} acc {:.4} lr {:.3e}",
            r.mean_loss,
            r.accuracy,
            r.lrs.last().copied().unwrap_or(0.0)
        );
        reports.push(r);
    }
    model.snap_to_f32();
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `None` for classes absent from the data.
    pub per_class: Vec<Option<f64>>,
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode accuracy (argmax, lowest index on ties), mean cross-entropy and
/// per-class accuracy.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation on an empty dataset".into()));
    }
    let c = data.n_classes;
    let (mut hit, mut seen) = (vec![0usize; c], vec![0usize; c]);
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.select(chunk)?;
        let logits = model.logits(&batch)?;
        if logits.cols() != c {
            return Err(Error::dim("evaluate", logits.shape(), &[chunk.len(), c]));
        }
        for (r, &y) in batch.labels.iter().enumerate() {
            let row = logits.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss_sum += lse - row[y];
            seen[y] += 1;
            hit[y] += usize::from(argmax(row) == y);
        }
    }
    let n = data.len();
    Ok(EvalReport {
        n,
        accuracy: hit.iter().sum::<usize>() as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
        per_class: (0..c)
            .map(|k| (seen[k] > 0).then(|| hit[k] as f64 / seen[k] as f64))
            .collect(),
    })
}
