use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autosim::IterationRecord;
use crate::error::{invalid, Error, Result};

/// Column order of every metrics file.
pub const COLUMNS: [&str; 10] = [
    "iteration",
    "cumulative_samples",
    "val_loss",
    "best_val_loss",
    "test_loss",
    "grad_norm",
    "cg_iters",
    "cg_residual",
    "wall_seconds",
    "psi",
];

/// Index of the only column allowed to differ between replays.
pub const WALL_SECONDS_COLUMN: usize = 8;

pub type MetricsRow = IterationRecord;

/// Writes one CSV row per iteration, flushing each row so an aborted run
/// leaves everything up to the failure on disk.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(COLUMNS)?;
        inner.flush()?;
        Ok(Self { inner, rows: 0 })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let psi = row.psi.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        self.inner.write_record([
            row.iteration.to_string(),
            row.cumulative_samples.to_string(),
            row.val_loss.to_string(),
            row.best_val_loss.to_string(),
            row.test_loss.to_string(),
            row.grad_norm.to_string(),
            row.cg_iters.to_string(),
            row.cg_residual.to_string(),
            row.wall_seconds.to_string(),
            psi,
        ])?;
        self.inner.flush()?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize) -> Result<T> {
    record
        .get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| invalid(format!("bad metrics field `{}`", COLUMNS[i])))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(invalid("metrics header does not match the schema"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        let psi = r
            .get(9)
            .unwrap_or("")
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| invalid("bad psi entry")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(MetricsRow {
            iteration: field(&r, 0)?,
            cumulative_samples: field(&r, 1)?,
            val_loss: field(&r, 2)?,
            best_val_loss: field(&r, 3)?,
            test_loss: field(&r, 4)?,
            grad_norm: field(&r, 5)?,
            cg_iters: field(&r, 6)?,
            cg_residual: field(&r, 7)?,
            wall_seconds: field(&r, 8)?,
            psi,
        });
    }
    Ok(rows)
}

/// End-of-run record written next to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub task: String,
    pub method: String,
    pub mode: String,
    pub seed: u64,
    pub iterations: usize,
    pub stop_reason: String,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
    pub final_test_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_val_loss: Option<f64>,
    /// Cumulative samples when the target was first reached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_to_target: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_to_target: Option<f64>,
    pub cumulative_samples: u64,
    /// Audited simulator counter at exit.
    pub ledger_samples: u64,
    pub wall_seconds: f64,
    pub final_psi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Summary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// First row whose best validation loss reached `target`.
pub fn first_at_target(rows: &[MetricsRow], target: f64) -> Option<&MetricsRow> {
    rows.iter().find(|r| r.best_val_loss <= target)
}
