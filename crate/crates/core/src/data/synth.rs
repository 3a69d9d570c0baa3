//! Synthetic classification tasks whose Bayes-optimal rule is known.
//!
//! Token task vocabulary: `0` PAD, `1` UNK, then `signal_vocab` signal ids
//! split evenly between classes (class `c` owns a contiguous run), then
//! `distractor_vocab` distractor ids. A sample holds `signal_per_sample`
//! tokens of its class, `confusers` tokens of one other class, and
//! distractors elsewhere. Counting signal tokens per class recovers the label.
//!
//! Patch task: one binary template per class (see [`patch_templates`]) plus
//! clamped Gaussian noise. A template's energy is its count of lit pixels per
//! channel, so the per-pixel SNR at noise level σ is `energy / (H·W·σ²)`.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Inputs, Noise};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenTaskSpec {
    pub size: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    pub signal_per_sample: usize,
    pub confusers: usize,
    pub signal_vocab: usize,
    pub distractor_vocab: usize,
    pub spurious_rate: f64,
}

impl Default for TokenTaskSpec {
    fn default() -> Self {
        Self {
            size: 512,
            n_classes: 4,
            seq_len: 16,
            signal_per_sample: 4,
            confusers: 2,
            signal_vocab: 16,
            distractor_vocab: 32,
            spurious_rate: 0.0,
        }
    }
}

impl TokenTaskSpec {
    pub fn per_class(&self) -> usize {
        self.signal_vocab / self.n_classes.max(1)
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.signal_vocab + self.distractor_vocab
    }

    fn distractor_base(&self) -> usize {
        2 + self.signal_vocab
    }

    /// Class owning signal id `tok`, if any.
    pub fn class_of(&self, tok: usize) -> Option<usize> {
        let per = self.per_class();
        if tok < 2 || per == 0 {
            return None;
        }
        let c = (tok - 2) / per;
        (c < self.n_classes).then_some(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("dataset size must be > 0".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("token task needs at least 2 classes".into()));
        }
        if self.per_class() == 0 {
            return Err(Error::Config(format!(
                "{} classes do not fit in a signal vocabulary of {}",
                self.n_classes, self.signal_vocab
            )));
        }
        if self.distractor_vocab == 0 {
            return Err(Error::Config("distractor vocabulary must be > 0".into()));
        }
        if self.signal_per_sample == 0 || self.confusers >= self.signal_per_sample {
            return Err(Error::Config(
                "need signal_per_sample > confusers >= 0 for a recoverable label".into(),
            ));
        }
        if self.signal_per_sample + self.confusers > self.seq_len {
            return Err(Error::Config(format!(
                "{} signal tokens do not fit in seq_len {}",
                self.signal_per_sample + self.confusers,
                self.seq_len
            )));
        }
        Noise::Spurious(self.spurious_rate).validate()?;
        Ok(())
    }
}

/// Replaces each position with a uniformly drawn distractor with probability
/// `rate`.
pub fn inject_spurious_tokens<R: Rng + ?Sized>(
    ids: &mut [usize],
    rate: f64,
    distractors: std::ops::Range<usize>,
    rng: &mut R,
) -> Result<()> {
    Noise::Spurious(rate).validate()?;
    if rate == 0.0 {
        return Ok(());
    }
    for id in ids {
        if rng.random::<f64>() < rate {
            *id = rng.random_range(distractors.clone());
        }
    }
    Ok(())
}

/// Clean samples are drawn first, then spurious replacement runs over the whole
/// set, so the clean content for a seed does not depend on the rate.
pub fn synth_token_task<R: Rng + ?Sized>(spec: &TokenTaskSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let (n, per) = (spec.seq_len, spec.per_class());
    let dbase = spec.distractor_base();
    let mut ids = Vec::with_capacity(spec.size * n);
    let mut labels = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let y = rng.random_range(0..spec.n_classes);
        let other = (y + rng.random_range(1..spec.n_classes)) % spec.n_classes;
        let mut row: Vec<usize> = (0..n).map(|_| rng.random_range(dbase..dbase + spec.distractor_vocab)).collect();
        let pos = sample(rng, n, spec.signal_per_sample + spec.confusers);
        for (j, p) in pos.iter().enumerate() {
            let c = if j < spec.signal_per_sample { y } else { other };
            row[p] = 2 + c * per + rng.random_range(0..per);
        }
        ids.extend(row);
        labels.push(y);
    }
    inject_spurious_tokens(&mut ids, spec.spurious_rate, dbase..dbase + spec.distractor_vocab, rng)?;
    let mut d = Dataset::new(Inputs::Tokens { ids, seq_len: n }, labels, spec.n_classes)?;
    d.noise = vec![spec.spurious_rate; d.len()];
    Ok(d)
}

/// Majority class among signal tokens; ties (including no signal) go to the
/// lowest class index.
pub fn counting_oracle(tokens: &[usize], spec: &TokenTaskSpec) -> usize {
    let mut counts = vec![0usize; spec.n_classes];
    for &t in tokens {
        if let Some(c) = spec.class_of(t) {
            counts[c] += 1;
        }
    }
    argmax_lowest(&counts)
}

fn argmax_lowest(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchTaskSpec {
    pub size: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub sigma: f64,
}

impl Default for PatchTaskSpec {
    fn default() -> Self {
        Self {
            size: 512,
            n_classes: 4,
            image_size: 8,
            channels: 1,
            sigma: 0.0,
        }
    }
}

impl PatchTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("dataset size must be > 0".into()));
        }
        if !(2..=8).contains(&self.n_classes) {
            return Err(Error::Config(format!(
                "patch task supports 2 to 8 classes, got {}",
                self.n_classes
            )));
        }
        if self.image_size < 4 || self.channels == 0 {
            return Err(Error::Config("patch task needs image_size >= 4 and channels >= 1".into()));
        }
        Noise::Gaussian(self.sigma).validate()?;
        Ok(())
    }
}

/// The eight `s×s` binary templates, in class order: horizontal band, vertical
/// band, diagonal, anti-diagonal, frame, centre square, checkerboard, plus.
pub fn patch_templates(s: usize) -> Vec<Vec<f64>> {
    let t = (s / 4).max(1);
    let lo = s / 2 - t / 2;
    let band = |i: usize| i >= lo && i < lo + t;
    let pattern = |f: &dyn Fn(usize, usize) -> bool| -> Vec<f64> {
        (0..s * s).map(|k| if f(k / s, k % s) { 1.0 } else { 0.0 }).collect()
    };
    vec![
        pattern(&|r, _| band(r)),
        pattern(&|_, c| band(c)),
        pattern(&|r, c| r == c),
        pattern(&|r, c| r + c == s - 1),
        pattern(&|r, c| r == 0 || c == 0 || r == s - 1 || c == s - 1),
        pattern(&|r, c| (s / 4..s - s / 4).contains(&r) && (s / 4..s - s / 4).contains(&c)),
        pattern(&|r, c| (r / t + c / t) % 2 == 0),
        pattern(&|r, c| band(r) || band(c)),
    ]
}

/// Lit pixels per channel of class `c`'s template.
pub fn template_energy(image_size: usize, class: usize) -> f64 {
    patch_templates(image_size)[class].iter().sum()
}

/// Adds i.i.d. `N(0, σ²)` to every pixel and clamps to `[0, 1]`.
pub fn inject_gaussian_noise<R: Rng + ?Sized>(images: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    Noise::Gaussian(sigma).validate()?;
    let mut out = images.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn synth_patch_task<R: Rng + ?Sized>(spec: &PatchTaskSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let templates = patch_templates(s);
    let mut data = Vec::with_capacity(spec.size * spec.channels * s * s);
    let mut labels = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let y = rng.random_range(0..spec.n_classes);
        for _ in 0..spec.channels {
            data.extend_from_slice(&templates[y]);
        }
        labels.push(y);
    }
    let clean = Tensor::new(vec![spec.size, spec.channels, s, s], data)?;
    let noisy = inject_gaussian_noise(&clean, spec.sigma, rng)?;
    let mut d = Dataset::new(Inputs::Images(noisy), labels, spec.n_classes)?;
    d.noise = vec![spec.sigma; d.len()];
    Ok(d)
}

/// Class of the template nearest in squared distance to `image` (`C×s×s`);
/// ties go to the lowest index.
pub fn nearest_template_oracle(image: &Tensor, n_classes: usize) -> usize {
    let s = image.cols();
    let templates = patch_templates(s);
    let plane = s * s;
    let mut best = (0, f64::INFINITY);
    for (c, t) in templates.iter().take(n_classes).enumerate() {
        let d: f64 = image
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - t[k % plane]).powi(2))
            .sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Accuracy of the task's analytic oracle on `data`. Token datasets need the
/// generating spec to know the class sub-vocabularies.
pub fn oracle_accuracy(data: &Dataset, tokens: Option<&TokenTaskSpec>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("oracle on an empty dataset".into()));
    }
    let mut hits = 0;
    for i in 0..data.len() {
        let pred = match (&data.inputs, tokens) {
            (Inputs::Tokens { .. }, Some(spec)) => counting_oracle(data.inputs.tokens(i).unwrap(), spec),
            (Inputs::Images(_), _) => nearest_template_oracle(&data.inputs.image(i).unwrap(), data.n_classes),
            (Inputs::Tokens { .. }, None) => {
                return Err(Error::Usage("token oracle needs the task spec".into()));
            }
        };
        hits += usize::from(pred == data.labels[i]);
    }
    Ok(hits as f64 / data.len() as f64)
}
