//! Lowercased alphanumeric tokenization, frequency-ranked vocabularies and the
//! `label<TAB>text` loader.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{Dataset, Inputs, PAD, UNK};
use crate::error::{Error, Result};

/// Maximal runs of alphanumeric characters or `_`, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids truncated or right-padded to `seq_len`. Text with no tokens
    /// becomes a single UNK so every row has at least one real position.
    pub fn encode(&self, text: &str, seq_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text).iter().take(seq_len).map(|t| self.id(t)).collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids.resize(seq_len, PAD);
        ids
    }
}

/// Ids `0` and `1` are PAD and UNK. Tokens seen at least `min_freq` times are
/// ranked by descending frequency then lexicographically, and the first
/// `max_size` (if given) receive ids from 2.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize, max_size: Option<usize>) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        for t in tokenize(doc) {
            *freq.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().filter(|(_, f)| *f >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(m) = max_size {
        ranked.truncate(m);
    }
    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    let index = tokens.iter().enumerate().skip(2).map(|(i, t)| (t.clone(), i)).collect();
    Vocab { tokens, index }
}

/// Parses `label<TAB>text` lines; blank lines are skipped.
pub fn parse_tsv(content: &str) -> Result<Vec<(usize, String)>> {
    let mut rows = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("line {}: missing tab separator", n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad label {label:?}", n + 1)))?;
        rows.push((label, text.to_string()));
    }
    Ok(rows)
}

/// Loads a `label<TAB>text` file. Without `vocab` one is built from this file.
pub fn load_tsv(
    path: impl AsRef<Path>,
    n_classes: usize,
    seq_len: usize,
    vocab: Option<&Vocab>,
    min_freq: usize,
    max_vocab: Option<usize>,
) -> Result<(Dataset, Vocab)> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_tsv(&content)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(rows.iter().map(|(_, t)| t.as_str()), min_freq, max_vocab),
    };
    let mut ids = Vec::with_capacity(rows.len() * seq_len);
    let mut labels = Vec::with_capacity(rows.len());
    for (label, text) in &rows {
        ids.extend(vocab.encode(text, seq_len));
        labels.push(*label);
    }
    let d = Dataset::new(Inputs::Tokens { ids, seq_len }, labels, n_classes)?;
    Ok((d, vocab))
}
