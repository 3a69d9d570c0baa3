use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,epoch,lr,loss,acc";

/// Comma-separated per-step log. The file is truncated on creation and every
/// row is flushed as it is written. Floats use the shortest representation
/// that parses back to the same value.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            path,
            out: BufWriter::new(f),
        };
        log.write_line(METRICS_HEADER)?;
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, step: usize, epoch: usize, lr: f64, loss: f64, acc: f64) -> Result<()> {
        self.write_line(&format!("{step},{epoch},{lr},{loss},{acc}"))
    }
}
