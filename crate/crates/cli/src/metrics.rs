//! Append-only JSON-lines metrics, one object per line, flushed per record.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub step: usize,
    pub objective: String,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub main: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtp: Option<f64>,
    /// Supervised tokens processed so far.
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_sec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    /// GRPO groups surviving zero-variance filtering in this batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups_kept: Option<usize>,
}

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
    last_step: Option<usize>,
}

impl MetricsWriter {
    /// Starts a fresh metrics file, replacing any previous run's.
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { file, path: path.to_path_buf(), last_step: None })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: &MetricRecord) -> Result<(), CliError> {
        if !rec.loss.is_finite() {
            return Err(CliError::DivergedLoss { step: rec.step, what: format!("loss {}", rec.loss) });
        }
        if self.last_step.is_some_and(|s| rec.step < s) {
            return Err(CliError::Format(format!("metric step {} after {:?}", rec.step, self.last_step)));
        }
        let line = serde_json::to_string(rec).map_err(|e| CliError::Format(e.to_string()))?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        self.last_step = Some(rec.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| CliError::Format(e.to_string()))
        })
        .collect()
}
