//! IDX files: big-endian, unsigned-byte element type only.
//!
//! Header: two zero bytes, type byte `0x08`, rank byte, then one `u32` per
//! dimension. Images are rank 3 (`N×H×W`) or rank 4 (`N×C×H×W`); labels are
//! rank 1.

use std::path::Path;

use super::{Dataset, Inputs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset, msg: &str| Error::Format {
            offset,
            msg: msg.into(),
        };
        if bytes.len() < 4 {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(fmt(0, "bad magic"));
        }
        if bytes[2] != UBYTE {
            return Err(fmt(2, "unsupported element type"));
        }
        let rank = bytes[3] as usize;
        if !(1..=4).contains(&rank) {
            return Err(fmt(3, "unsupported rank"));
        }
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(fmt(bytes.len(), "truncated dimensions"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| {
                let at = 4 + 4 * i;
                u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
            })
            .collect();
        let n: usize = dims.iter().product();
        let body = &bytes[header..];
        if body.len() < n {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("truncated data: expected {n} bytes after header, found {}", body.len()),
            });
        }
        if body.len() > n {
            return Err(fmt(header + n, "trailing bytes"));
        }
        Ok(Self {
            dims,
            data: body.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0, 0, UBYTE, self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    /// Pixels `v/255` as `N×C×H×W`.
    pub fn to_images(&self) -> Result<Tensor> {
        let shape = match self.dims[..] {
            [n, h, w] => vec![n, 1, h, w],
            [n, c, h, w] => vec![n, c, h, w],
            _ => {
                return Err(Error::Format {
                    offset: 3,
                    msg: format!("image file must have rank 3 or 4, got {}", self.dims.len()),
                })
            }
        };
        Tensor::new(shape, self.data.iter().map(|&b| f64::from(b) / 255.0).collect())
            .map_err(|_| Error::Data("empty image file".into()))
    }

    /// Rounds `v·255` to the nearest byte. Single-channel images are stored at
    /// rank 3.
    pub fn from_images(images: &Tensor) -> Result<Self> {
        let s = images.shape();
        let dims = match s {
            [n, 1, h, w] => vec![*n, *h, *w],
            [_, _, _, _] => s.to_vec(),
            _ => return Err(Error::dim("idx images", s, &[0, 0, 0, 0])),
        };
        let data = images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    IdxArray::parse(&bytes)
}

pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, array.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    read_idx(path)?.to_images()
}

pub fn load_idx_labels(path: impl AsRef<Path>, n_classes: usize) -> Result<Vec<usize>> {
    let a = read_idx(path)?;
    if a.dims.len() != 1 {
        return Err(Error::Format {
            offset: 3,
            msg: format!("label file must have rank 1, got {}", a.dims.len()),
        });
    }
    let labels: Vec<usize> = a.data.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Data(format!("label {bad} >= n_classes {n_classes}")));
    }
    Ok(labels)
}

pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, n_classes: usize) -> Result<Dataset> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels, n_classes)?;
    Dataset::new(Inputs::Images(x), y, n_classes)
}
