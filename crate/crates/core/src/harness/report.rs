//! Ablation table over finished run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::harness::eval::EvalReport;
use crate::trainer::metrics::{final_epoch_mean_loss, read_metrics, RunInfo, EVAL_FILE, METRICS_FILE, RUN_FILE};

pub const REPORT_HEADER: &str = "mode,seed,recall@1,recall@5,recall@10,mAP,final_epoch_loss";

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: String,
    pub seed: u64,
    pub recall: [Option<f64>; 3],
    pub map: f64,
    pub final_epoch_loss: Option<f64>,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6},{}",
            self.mode,
            self.seed,
            f(self.recall[0]),
            f(self.recall[1]),
            f(self.recall[2]),
            self.map,
            f(self.final_epoch_loss)
        )
    }
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid("report", format!("{}: {e}", path.display())))
}

/// Reads one run directory.
pub fn read_run(dir: &Path) -> Result<ReportRow> {
    let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
    let eval: EvalReport = read_json(&dir.join(EVAL_FILE))?;
    let steps = read_metrics(&dir.join(METRICS_FILE))?;
    if steps.is_empty() {
        return Err(Error::invalid("report", format!("{}: no step metrics", dir.display())));
    }
    Ok(ReportRow {
        mode: info.mode,
        seed: info.seed,
        recall: [eval.recall_at(1), eval.recall_at(5), eval.recall_at(10)],
        map: eval.map,
        final_epoch_loss: final_epoch_mean_loss(&steps),
    })
}

/// Run directories directly under `root`, sorted by name.
pub fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Builds the table; runs that cannot be read are skipped with a warning.
pub fn build_report(root: &Path) -> Result<(Vec<ReportRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for dir in run_dirs(root)? {
        match read_run(&dir) {
            Ok(r) => rows.push(r),
            Err(e) => {
                let w = format!("skipping {}: {e}", dir.display());
                log::warn!("{w}");
                warnings.push(w);
            }
        }
    }
    rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.seed.cmp(&b.seed)));
    Ok((rows, warnings))
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn write_report(root: &Path, out: &Path) -> Result<Vec<String>> {
    let (rows, warnings) = build_report(root)?;
    fs::write(out, render_csv(&rows)).map_err(|e| Error::io(out, e))?;
    Ok(warnings)
}
