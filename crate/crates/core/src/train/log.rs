use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DfgError, Result};

/// One row of `training_log.csv`. Losses not computed in an iteration are
/// left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Last critic objective of the iteration, penalty included.
    #[serde(rename = "L_D")]
    pub critic: Option<f64>,
    #[serde(rename = "GP")]
    pub penalty: Option<f64>,
    /// `mean D(real) - mean D(fake)` at the last critic update.
    #[serde(rename = "W_est")]
    pub wasserstein: Option<f64>,
    #[serde(rename = "L_G")]
    pub generator: Option<f64>,
    #[serde(rename = "L_C_real")]
    pub classifier_real: Option<f64>,
    #[serde(rename = "L_C_gen")]
    pub classifier_generated: Option<f64>,
    #[serde(rename = "L_C_concat")]
    pub classifier_concat: Option<f64>,
    #[serde(rename = "L_E")]
    pub extractor: Option<f64>,
}

fn csv_err(e: csv::Error) -> DfgError {
    DfgError::Io(e.into())
}

/// Streaming CSV log; flushed after every row so an aborted run keeps
/// everything up to the failure.
pub struct LogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W) -> Self {
        LogWriter {
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(out),
        }
    }

    pub fn push(&mut self, row: &LogRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

impl LogWriter<File> {
    /// Creates `path`, first copying in the rows of an existing log up to
    /// and including `keep_through` (for resumed runs).
    pub fn create(path: &Path, keep_through: Option<usize>) -> Result<Self> {
        let kept = match keep_through {
            Some(last) if path.exists() => read_log(path)?
                .into_iter()
                .filter(|r| r.iteration <= last)
                .collect(),
            _ => Vec::new(),
        };
        let mut w = LogWriter::new(File::create(path)?);
        for row in &kept {
            w.push(row)?;
        }
        Ok(w)
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = LogWriter::new(File::create(path)?);
    for row in rows {
        w.push(row)?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .map(|row| row.map_err(|e| DfgError::format(path, e.to_string())))
        .collect()
}
