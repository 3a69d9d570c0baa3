//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DGSACKPT"
//! version  u32
//! cfg_len  u32, then cfg_len bytes of UTF-8 run configuration (key=value lines)
//! hash     32 bytes, SHA-256 of the model section's canonical text
//! count    u32
//! count × { rank u32, rank × dim u32, numel × f32 }
//! ```

use std::path::Path;

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGSACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub version: u32,
    pub config_text: String,
    pub model_hash: [u8; 32],
    pub tensors: Vec<Tensor>,
}

impl CheckpointFile {
    pub fn from_model(model: &Model, config_text: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_text: config_text.to_string(),
            model_hash: model.config().hash(),
            tensors: model.params().iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let len = r.u32()? as usize;
        let at = r.at;
        let config_text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "config text is not UTF-8".into(),
        })?;
        let model_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.at;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|_| Error::Format {
                offset: at,
                msg: "invalid tensor shape".into(),
            })?);
        }
        if r.at != bytes.len() {
            return Err(Error::Format {
                offset: r.at,
                msg: "trailing bytes".into(),
            });
        }
        Ok(Self {
            version,
            config_text,
            model_hash,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!("truncated checkpoint: needed {n} bytes at {}", self.at),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Model, config_text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, CheckpointFile::from_model(model, config_text).encode()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CheckpointFile::decode(&bytes)
}

impl Model {
    /// Loads checkpoint tensors into a model built from `self`'s config after
    /// checking that the stored model hash matches it.
    pub fn load_checkpoint(&mut self, file: &CheckpointFile) -> Result<()> {
        let want = self.config().hash();
        if file.model_hash != want {
            return Err(Error::Config(format!(
                "checkpoint model hash {} does not match config hash {}",
                hex::encode(file.model_hash),
                hex::encode(want)
            )));
        }
        self.set_params(file.tensors.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, Variant};
    use crate::rng::seeded;

    #[test]
    fn round_trip_after_f32_snap_is_exact() {
        let cfg = ModelConfig::text_tiny(Variant::Dgsa);
        let mut m = build_model(&cfg, &mut seeded(1, "m", 0)).unwrap();
        m.snap_to_f32();
        let bytes = CheckpointFile::from_model(&m, "a=1\n").encode();
        let f = CheckpointFile::decode(&bytes).unwrap();
        assert_eq!(f.config_text, "a=1\n");
        let mut fresh = build_model(&cfg, &mut seeded(2, "m", 0)).unwrap();
        fresh.load_checkpoint(&f).unwrap();
        assert_eq!(fresh.params(), m.params());
        assert_eq!(f.encode(), bytes);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let cfg = ModelConfig::vision_tiny(Variant::Vanilla);
        let m = build_model(&cfg, &mut seeded(1, "m", 0)).unwrap();
        let bytes = CheckpointFile::from_model(&m, "").encode();
        assert!(matches!(CheckpointFile::decode(&bytes[..bytes.len() - 2]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CheckpointFile::decode(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn hash_mismatch_is_refused() {
        let cfg = ModelConfig::text_tiny(Variant::Dgsa);
        let m = build_model(&cfg, &mut seeded(1, "m", 0)).unwrap();
        let f = CheckpointFile::from_model(&m, "");
        let other = ModelConfig {
            dropout: 0.1,
            ..cfg
        };
        let mut o = build_model(&other, &mut seeded(1, "m", 0)).unwrap();
        assert!(matches!(o.load_checkpoint(&f), Err(Error::Config(_))));
    }
}
