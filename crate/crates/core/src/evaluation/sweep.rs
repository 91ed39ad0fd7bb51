//! IoU as a function of a confidence threshold on predicted instances.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use super::{EvalError, IouCounts, VariantTable};
use crate::dataset::BitMask;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub confidence: f64,
    /// Image-sized mask.
    pub mask: BitMask,
}

/// All scored instances predicted for one (image, part), with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub image_id: String,
    pub part_class: String,
    pub gt: BitMask,
    pub instances: Vec<ScoredInstance>,
}

impl ScoredPrediction {
    /// Union of instances whose confidence strictly exceeds `threshold`.
    pub fn mask_above(&self, threshold: f64) -> Result<BitMask, EvalError> {
        let (w, h) = self.gt.dims();
        let mut out = BitMask::new(w, h);
        for inst in self.instances.iter().filter(|i| i.confidence > threshold) {
            out.union_with(&inst.mask)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub thresholds: Vec<f64>,
    /// Pooled IoU, parts by thresholds.
    pub table: VariantTable,
    /// Column with the best average.
    pub best: usize,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = self.table.to_text(3);
        let _ = writeln!(out, "best average at threshold {}", self.table.columns[self.best]);
        out
    }
}

/// Pooled per-part IoU for every threshold. Parts keep first-appearance order.
pub fn threshold_sweep(predictions: &[ScoredPrediction], thresholds: &[f64]) -> Result<SweepTable, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::EmptyThresholds);
    }
    if predictions.is_empty() {
        return Err(EvalError::Table("no predictions".into()));
    }
    let mut parts: Vec<String> = Vec::new();
    for p in predictions {
        if !parts.contains(&p.part_class) {
            parts.push(p.part_class.clone());
        }
    }
    let mut acc = vec![vec![IouCounts::default(); thresholds.len()]; parts.len()];
    for p in predictions {
        let row = parts.iter().position(|x| *x == p.part_class).unwrap_or_default();
        for (c, &t) in thresholds.iter().enumerate() {
            acc[row][c].add(IouCounts::of(&p.mask_above(t)?, &p.gt)?);
        }
    }
    let values = acc.iter().map(|r| r.iter().map(IouCounts::iou).collect()).collect();
    let table = VariantTable::new(parts, thresholds.iter().map(|t| t.to_string()).collect(), values)?;
    let best = table.best_column();
    Ok(SweepTable { thresholds: thresholds.to_vec(), table, best })
}
