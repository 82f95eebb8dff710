use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CoreError;

/// One row of the training metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_return: f64,
    pub normalized_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub wall_clock_s: f64,
}

/// Appends [`IterationMetrics`] rows, writing the header for a new file.
pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CoreError> {
        let path = path.as_ref().to_path_buf();
        let fresh = std::fs::metadata(&path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CoreError::io(&path, e))?;
        let writer = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        Ok(Self { path, writer })
    }

    pub fn append(&mut self, row: &IterationMetrics) -> Result<(), CoreError> {
        let err = |e: csv::Error| CoreError::Env(format!("{}: {e}", self.path.display()));
        self.writer.serialize(row).map_err(err)?;
        self.writer
            .flush()
            .map_err(|e| CoreError::io(&self.path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<IterationMetrics>, CoreError> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| CoreError::Corrupt(format!("{}: {e}", path.display())))?;
        r.deserialize()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CoreError::Corrupt(format!("{}: {e}", path.display())))
    }
}
