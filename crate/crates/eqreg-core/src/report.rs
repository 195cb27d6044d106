//! CSV emission for training records, grid summaries and solver traces.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a rerun
//! with identical state produces byte-identical files. Wall-clock columns are
//! zeroed in deterministic mode since they are the one field a faithful rerun
//! cannot reproduce.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::training::{EpochRecord, GridOutcome};

/// `epoch,train_loss,test_loss,mean_iters,wall_ms` per training epoch.
pub fn write_epoch_csv(path: &Path, records: &[EpochRecord], deterministic: bool) -> Result<()> {
    let mut out = String::from("epoch,train_loss,test_loss,mean_iters,wall_ms\n");
    for r in records {
        let wall = if deterministic { 0 } else { r.wall_ms };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.test_loss, r.mean_iters, wall
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One row per grid cell: the hyperparameters, the outcome and a stable
/// label usable as a config hash.
pub fn write_grid_summary_csv(path: &Path, outcomes: &[GridOutcome]) -> Result<()> {
    let mut out =
        String::from("label,mode,task,tau,gamma,sigma,alpha,final_test_loss,success,epochs_completed,aborted\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            o.label,
            o.mode.name(),
            o.task,
            o.tau,
            o.gamma,
            o.sigma,
            o.alpha,
            o.final_test_loss,
            o.success,
            o.epochs_completed,
            o.aborted
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Boxplot-ready rows (mode, task, final loss) for the successful cells.
pub fn write_boxplot_csv(path: &Path, outcomes: &[GridOutcome]) -> Result<()> {
    let mut out = String::from("mode,task,final_test_loss\n");
    for o in outcomes.iter().filter(|o| o.success) {
        out.push_str(&format!("{},{},{}\n", o.mode.name(), o.task, o.final_test_loss));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Histogram-ready rows (mode, epochs completed) for the successful cells.
pub fn write_epochs_histogram_csv(path: &Path, outcomes: &[GridOutcome]) -> Result<()> {
    let mut out = String::from("mode,epochs_completed\n");
    for o in outcomes.iter().filter(|o| o.success) {
        out.push_str(&format!("{},{}\n", o.mode.name(), o.epochs_completed));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-solve convergence trace: `iteration,relative_residual`.
pub fn write_trace_csv(path: &Path, residuals: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "iteration,relative_residual")?;
    for (i, r) in residuals.iter().enumerate() {
        writeln!(buf, "{},{}", i + 1, r)?;
    }
    fs::write(path, buf)?;
    Ok(())
}
