//! Datasets: synthetic token and patch tasks with analytic oracles, IDX image
//! files, tab-separated text, and noise transforms.

pub mod idx;
pub mod synth;
pub mod text;

pub use idx::{load_idx_dataset, load_idx_images, load_idx_labels, read_idx, write_idx, IdxArray};
pub use synth::{
    counting_oracle, inject_gaussian_noise, inject_spurious_tokens, nearest_template_oracle,
    oracle_accuracy, patch_templates, synth_patch_task, synth_token_task, template_energy,
    PatchTaskSpec, TokenTaskSpec,
};
pub use text::{build_vocab, load_tsv, tokenize, Vocab};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// Row-major `B×seq_len` token ids; [`PAD`] marks padding.
    Tokens { ids: Vec<usize>, seq_len: usize },
    /// `B×C×H×W` pixels in `[0, 1]`.
    Images(Tensor),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Tokens { ids, seq_len } => ids.len() / seq_len,
            Inputs::Images(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token row `i`.
    pub fn tokens(&self, i: usize) -> Option<&[usize]> {
        match self {
            Inputs::Tokens { ids, seq_len } => Some(&ids[i * seq_len..(i + 1) * seq_len]),
            Inputs::Images(_) => None,
        }
    }

    /// Image `i` as `C×H×W`.
    pub fn image(&self, i: usize) -> Option<Tensor> {
        match self {
            Inputs::Images(t) => Some(t.index0(i)),
            Inputs::Tokens { .. } => None,
        }
    }

    fn select(&self, index: &[usize]) -> Result<Inputs> {
        Ok(match self {
            Inputs::Tokens { ids, seq_len } => {
                let mut out = Vec::with_capacity(index.len() * seq_len);
                for &i in index {
                    out.extend_from_slice(&ids[i * seq_len..(i + 1) * seq_len]);
                }
                Inputs::Tokens {
                    ids: out,
                    seq_len: *seq_len,
                }
            }
            Inputs::Images(t) => {
                let parts: Vec<Tensor> = index.iter().map(|&i| t.index0(i)).collect();
                Inputs::Images(Tensor::stack(&parts)?)
            }
        })
    }
}

/// Labelled samples. Batches are datasets too.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Noise level applied to each sample (σ or spurious rate).
    pub noise: Vec<f64>,
}

pub type Batch = Dataset;

impl Dataset {
    pub fn new(inputs: Inputs, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Inputs::Tokens { ids, seq_len } = &inputs {
            if *seq_len == 0 || ids.len() % seq_len != 0 {
                return Err(Error::Data(format!(
                    "{} token ids do not form rows of {seq_len}",
                    ids.len()
                )));
            }
        }
        if inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} >= n_classes {n_classes}")));
        }
        let noise = vec![0.0; labels.len()];
        Ok(Self {
            inputs,
            labels,
            n_classes,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, index: &[usize]) -> Result<Dataset> {
        if index.is_empty() {
            return Err(Error::Usage("empty selection".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Usage(format!("sample {bad} out of range for {}", self.len())));
        }
        Ok(Dataset {
            inputs: self.inputs.select(index)?,
            labels: index.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            noise: index.iter().map(|&i| self.noise[i]).collect(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    None,
    Gaussian(f64),
    Spurious(f64),
}

impl Noise {
    pub fn validate(self) -> Result<Self> {
        match self {
            Noise::Gaussian(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("noise sigma {s} must be >= 0")))
            }
            Noise::Spurious(r) if !(0.0..1.0).contains(&r) => {
                Err(Error::Config(format!("spurious rate {r} outside [0, 1)")))
            }
            n => Ok(n),
        }
    }

    pub fn level(self) -> f64 {
        match self {
            Noise::None => 0.0,
            Noise::Gaussian(v) | Noise::Spurious(v) => v,
        }
    }
}
