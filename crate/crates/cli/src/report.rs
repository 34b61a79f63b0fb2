//! Self-contained evaluation report: metrics plus the per-sample
//! predictions they were computed from, so two reports can be compared
//! without re-running any model.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dfdet_core::metrics::{EvalRecord, MetricsReport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValLoss {
    pub fake: f64,
    pub real: f64,
    pub train: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    /// Seed of the dataset the evaluation split was drawn from.
    pub split_seed: u64,
    pub split_size: usize,
    pub head: String,
    pub threshold: f64,
    pub metrics: MetricsReport,
    /// Validation distillation loss, present when a teacher was supplied.
    pub val_loss: Option<ValLoss>,
    pub predictions: Vec<EvalRecord>,
}

impl Report {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Both reports must reference the same evaluation split.
    pub fn check_same_split(&self, other: &Report) -> Result<()> {
        if self.split_seed != other.split_seed || self.split_size != other.split_size {
            bail!(
                "reports cover different splits: seed {}/{} size {}/{}",
                self.split_seed,
                other.split_seed,
                self.split_size,
                other.split_size
            );
        }
        Ok(())
    }
}
