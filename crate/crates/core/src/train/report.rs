use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Fraction of nonzero adapter codes on the eval set.
    pub density: f64,
}

/// History and summary of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// Eval loss before the first update.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub trainable_params: usize,
    /// Per-atom count of nonzero eval codes, adapters concatenated.
    pub atom_usage: Vec<u64>,
    /// Set when training stopped on a non-finite value.
    pub failure: Option<String>,
    pub snapshot: Option<String>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,eval_loss,density";

impl RunReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.history {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.eval_loss, r.density);
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `history.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("history.csv"), self.history_csv())?;
        std::fs::write(dir.join("summary.json"), self.summary_json()?)?;
        Ok(())
    }

    pub fn reduction(&self) -> f64 {
        self.initial_eval_loss / self.final_eval_loss
    }
}
