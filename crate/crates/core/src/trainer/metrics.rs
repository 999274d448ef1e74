//! Per-step metrics records and the run output sink.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const RUN_FILE: &str = "run.json";

/// One line of `metrics.jsonl`. Non-finite losses are recorded as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub generation: usize,
    pub epoch: usize,
    pub query: usize,
    pub policy_losses: Vec<Option<f64>>,
    pub hard_losses: Vec<Option<f64>>,
    pub soft_losses: Vec<Option<f64>>,
    /// Weight of the soft term actually applied (0 without a snapshot).
    pub alpha: f64,
    pub mean_loss: Option<f64>,
    pub controller_entropy: Option<f64>,
    pub reward_baseline: Option<f64>,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub generation: usize,
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub skipped: usize,
}

/// Run description written next to the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub mode: String,
    pub seed: u64,
    pub precision: String,
    pub generations: usize,
    pub epochs: usize,
    pub wall_seconds: f64,
}

/// Where a run writes its artifacts. Without a directory everything stays in
/// memory.
#[derive(Debug, Default)]
pub struct RunOutput {
    dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

impl RunOutput {
    pub fn in_memory() -> Self {
        RunOutput::default()
    }

    /// Opens `dir`, appending to existing metrics when `append`.
    pub fn to_dir(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if !append {
            let s = dir.join(SUMMARY_FILE);
            std::fs::write(&s, "generation,epoch,steps,mean_loss,skipped\n").map_err(|e| Error::io(&s, e))?;
        }
        Ok(RunOutput {
            dir: Some(dir.to_path_buf()),
            metrics: Some(BufWriter::new(file)),
            ..Default::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn record_step(&mut self, m: StepMetrics) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.dir.as_ref()) {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        }
        self.steps.push(m);
        Ok(())
    }

    pub fn record_epoch(&mut self, e: EpochSummary) -> Result<()> {
        if let Some(dir) = &self.dir {
            if let Some(w) = self.metrics.as_mut() {
                w.flush().map_err(|err| Error::io(dir.join(METRICS_FILE), err))?;
            }
            let path = dir.join(SUMMARY_FILE);
            let mut f = OpenOptions::new()
                .append(true)
                .create(true)
                .open(&path)
                .map_err(|err| Error::io(&path, err))?;
            writeln!(f, "{},{},{},{},{}", e.generation, e.epoch, e.steps, e.mean_loss, e.skipped)
                .map_err(|err| Error::io(&path, err))?;
        }
        self.epochs.push(e);
        Ok(())
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(name);
            let text = serde_json::to_string_pretty(value).expect("serializable");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.dir.as_ref()) {
            w.flush().map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        }
        Ok(())
    }
}

/// Reads `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Mean of the per-step mean losses over the last (generation, epoch) seen.
pub fn final_epoch_mean_loss(steps: &[StepMetrics]) -> Option<f64> {
    let last = steps.last()?;
    let vals: Vec<f64> = steps
        .iter()
        .filter(|s| s.generation == last.generation && s.epoch == last.epoch)
        .filter_map(|s| s.mean_loss)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
