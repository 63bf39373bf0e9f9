//! Metric logs as CSV: one row per optimisation step, one per
//! evaluation. Floats are written shortest-round-trip so a reread file
//! reproduces the run bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CodafError, Result};
use crate::losses::LossBreakdown;

/// Loss components of one optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub det: f64,
    pub contrast: f64,
    pub ssim: f64,
    pub mae: f64,
    pub sparse: f64,
    pub smooth: f64,
    pub sm: f64,
    pub attn: f64,
    pub align_total: f64,
    pub total: f64,
    /// Largest composition-identity violation observed at this step.
    pub identity_gap: f64,
}

impl StepRow {
    pub fn new(epoch: usize, step: usize, b: &LossBreakdown, lambda: f64) -> Self {
        StepRow {
            epoch,
            step,
            det: b.det,
            contrast: b.contrast,
            ssim: b.ssim,
            mae: b.mae,
            sparse: b.sparse,
            smooth: b.smooth,
            sm: b.sm,
            attn: b.attn,
            align_total: b.align_total,
            total: b.total,
            identity_gap: b.identity_gap(lambda),
        }
    }
}

/// One evaluation pass over the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub ap50: f64,
    pub ap50_95: f64,
    pub wall_s: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CodafError::data(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| CodafError::data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CodafError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CodafError::data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| CodafError::data(format!("{}: {e}", path.display())))?);
    }
    Ok(rows)
}
