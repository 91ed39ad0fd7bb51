//! IoU metrics, variant tables, threshold sweeps, variant selection and
//! learning curves.

mod curve;
mod fusion;
mod sweep;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{BitMask, DatasetError, SegmentMask};

pub use curve::{evaluate_models, label_efficiency_curve, CurveConfig, CurvePoint, LearningCurve, FUSED};
pub use fusion::{
    fuse_best_per_part, selection_experiment, FusionSelection, SelectionCurve, SelectionData, SelectionPoint,
};
pub use sweep::{threshold_sweep, ScoredInstance, ScoredPrediction, SweepTable};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("missing cell ({part}, {variant})")]
    MissingCell { part: String, variant: String },
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("threshold list is empty")]
    EmptyThresholds,
    #[error("sample size {n} exceeds the {available} available images")]
    SampleTooLarge { n: usize, available: usize },
    #[error("sizes must be positive")]
    ZeroSize,
    #[error("malformed table: {0}")]
    Table(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Intersection and union pixel counts, summed over any number of images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &BitMask, gt: &BitMask) -> Result<Self, DatasetError> {
        let (intersection, union) = pred.overlap_counts(gt)?;
        Ok(Self { intersection, union })
    }

    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// `intersection / union`, or 1.0 when both masks were empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Intersection over union; two empty masks score 1.0.
pub fn iou(pred: &BitMask, gt: &BitMask) -> Result<f64, DatasetError> {
    Ok(IouCounts::of(pred, gt)?.iou())
}

pub fn iou_segments(pred: &SegmentMask, gt: &SegmentMask) -> Result<f64, DatasetError> {
    iou(&pred.decode()?, &gt.decode()?)
}

/// Parts as rows, variants (or thresholds) as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTable {
    pub parts: Vec<String>,
    pub columns: Vec<String>,
    /// `values[part][column]`
    pub values: Vec<Vec<f64>>,
}

impl VariantTable {
    pub fn new(parts: Vec<String>, columns: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if parts.is_empty() || columns.is_empty() {
            return Err(EvalError::Table("table needs at least one row and one column".into()));
        }
        if values.len() != parts.len() || values.iter().any(|r| r.len() != columns.len()) {
            return Err(EvalError::Table("cell grid does not match the row and column labels".into()));
        }
        if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EvalError::Table("cell outside [0, 1]".into()));
        }
        Ok(Self { parts, columns, values })
    }

    pub fn column(&self, name: &str) -> Result<usize, EvalError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| EvalError::UnknownColumn(name.to_string()))
    }

    pub fn get(&self, part: &str, column: &str) -> Option<f64> {
        let r = self.parts.iter().position(|p| p == part)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.values[r][c])
    }

    /// Unweighted mean over parts.
    pub fn average(&self, column: usize) -> f64 {
        self.values.iter().map(|r| r[column]).sum::<f64>() / self.parts.len() as f64
    }

    pub fn averages(&self) -> Vec<f64> {
        (0..self.columns.len()).map(|c| self.average(c)).collect()
    }

    /// Column with the highest average; ties go to the earlier column.
    pub fn best_column(&self) -> usize {
        let avg = self.averages();
        (0..avg.len()).fold(0, |best, c| if avg[c] > avg[best] { c } else { best })
    }

    /// Restricts the table to `columns`, in that order.
    pub fn select(&self, columns: &[&str]) -> Result<VariantTable, EvalError> {
        let idx: Vec<usize> = columns.iter().map(|c| self.column(c)).collect::<Result<_, _>>()?;
        Ok(VariantTable {
            parts: self.parts.clone(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            values: self.values.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
        })
    }

    /// Reads `part,<column>,...` CSV. A row labelled `average` is ignored;
    /// averages are always recomputed.
    pub fn from_csv_str(text: &str) -> Result<Self, EvalError> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| EvalError::Table(e.to_string()))?.clone();
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut parts = Vec::new();
        let mut values = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| EvalError::Table(e.to_string()))?;
            let part = rec.get(0).unwrap_or_default().to_string();
            if part.eq_ignore_ascii_case("average") {
                continue;
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| EvalError::Table(format!("bad number '{v}' in row '{part}'"))))
                .collect::<Result<Vec<_>, _>>()?;
            parts.push(part);
            values.push(row);
        }
        Self::new(parts, columns, values)
    }

    pub fn read_csv(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::from_csv_str(&text)
    }

    /// CSV with an `average` row appended.
    pub fn to_csv(&self, decimals: usize) -> String {
        let mut out = String::from("part");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let mut row = |label: &str, cells: &[f64]| {
            out.push_str(label);
            for v in cells {
                let _ = write!(out, ",{v:.decimals$}");
            }
            out.push('\n');
        };
        for (p, r) in self.parts.iter().zip(&self.values) {
            row(p, r);
        }
        row("average", &self.averages());
        out
    }

    /// Fixed-width text table. The best cell of every row, including the
    /// average row, carries a trailing `*`.
    pub fn to_text(&self, decimals: usize) -> String {
        let label_w = self.parts.iter().map(String::len).chain([7]).max().unwrap_or(7);
        let col_w = self.columns.iter().map(String::len).chain([decimals + 3]).max().unwrap_or(6);
        let mut out = format!("{:<label_w$}", "part");
        for c in &self.columns {
            let _ = write!(out, "  {c:>col_w$} ");
        }
        out.push('\n');
        let mut row = |label: &str, cells: &[f64]| {
            let best = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let _ = write!(out, "{label:<label_w$}");
            for &v in cells {
                let mark = if v == best { '*' } else { ' ' };
                let _ = write!(out, "  {v:>col_w$.decimals$}{mark}");
            }
            out.push('\n');
        };
        for (p, r) in self.parts.iter().zip(&self.values) {
            row(p, r);
        }
        row("average", &self.averages());
        out
    }
}

/// Counts for one (image, part, variant) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub image_id: String,
    pub part_class: String,
    pub variant: String,
    pub counts: IouCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// Headline metric: intersections and unions summed over images.
    pub pooled: VariantTable,
    /// Mean of per-image IoU.
    pub per_image_mean: VariantTable,
    pub per_image: Vec<RunRecord>,
    pub footnotes: Vec<String>,
}

impl IoUReport {
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("image_id,part_class,variant,intersection,union,iou\n");
        for r in &self.per_image {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                r.image_id,
                r.part_class,
                r.variant,
                r.counts.intersection,
                r.counts.union,
                r.counts.iou()
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("Pooled IoU\n");
        out.push_str(&self.pooled.to_text(3));
        out.push_str("\nPer-image mean IoU\n");
        out.push_str(&self.per_image_mean.to_text(3));
        for f in &self.footnotes {
            let _ = writeln!(out, "note: {f}");
        }
        out
    }
}

/// Reads the per-image CSV written by [`IoUReport::per_image_csv`]. Lines
/// starting with `#` are skipped.
pub fn read_runs_csv(text: &str) -> Result<Vec<RunRecord>, EvalError> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| EvalError::Table(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| EvalError::Table(format!("short row {rec:?}")));
        let count = |i: usize| {
            field(i)?.parse::<u64>().map_err(|_| EvalError::Table(format!("bad count in row {rec:?}")))
        };
        let counts = IouCounts { intersection: count(3)?, union: count(4)? };
        if counts.intersection > counts.union {
            return Err(EvalError::Table(format!("intersection exceeds union in row {rec:?}")));
        }
        out.push(RunRecord {
            image_id: field(0)?.to_string(),
            part_class: field(1)?.to_string(),
            variant: field(2)?.to_string(),
            counts,
        });
    }
    Ok(out)
}

/// Builds pooled and per-image-mean tables from per-image counts. Rows and
/// columns keep first-appearance order.
pub fn variant_table(runs: &[RunRecord]) -> Result<IoUReport, EvalError> {
    let mut parts: Vec<String> = Vec::new();
    let mut variants: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), (IouCounts, f64, usize)> = BTreeMap::new();
    let mut both_empty = 0usize;
    for r in runs {
        let p = match parts.iter().position(|x| *x == r.part_class) {
            Some(i) => i,
            None => {
                parts.push(r.part_class.clone());
                parts.len() - 1
            }
        };
        let v = match variants.iter().position(|x| *x == r.variant) {
            Some(i) => i,
            None => {
                variants.push(r.variant.clone());
                variants.len() - 1
            }
        };
        let cell = cells.entry((p, v)).or_default();
        cell.0.add(r.counts);
        cell.1 += r.counts.iou();
        cell.2 += 1;
        if r.counts.union == 0 {
            both_empty += 1;
        }
    }
    if runs.is_empty() {
        return Err(EvalError::Table("no evaluation runs".into()));
    }
    let mut pooled = vec![vec![0.0; variants.len()]; parts.len()];
    let mut mean = pooled.clone();
    for (p, part) in parts.iter().enumerate() {
        for (v, variant) in variants.iter().enumerate() {
            let (counts, sum, n) = cells
                .get(&(p, v))
                .ok_or_else(|| EvalError::MissingCell { part: part.clone(), variant: variant.clone() })?;
            pooled[p][v] = counts.iou();
            mean[p][v] = sum / *n as f64;
        }
    }
    let mut footnotes = vec!["pooled IoU sums intersections and unions over images before dividing".to_string()];
    if both_empty > 0 {
        footnotes.push(format!(
            "{both_empty} evaluation(s) had empty prediction and empty ground truth, scored 1.0"
        ));
    }
    Ok(IoUReport {
        pooled: VariantTable::new(parts.clone(), variants.clone(), pooled)?,
        per_image_mean: VariantTable::new(parts, variants, mean)?,
        per_image: runs.to_vec(),
        footnotes,
    })
}

/// Short stable hash of a configuration, embedded in every report.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).unwrap_or_default();
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// `# key=value` header lines for CSV reports.
pub fn report_header(seed: u64, config_hash: &str, extra: &[(&str, String)]) -> String {
    let mut out = format!("# seed={seed}\n# config={config_hash}\n");
    for (k, v) in extra {
        let _ = writeln!(out, "# {k}={v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let left = BitMask::from_fn(10, 10, |x, _| x < 5);
        let top = BitMask::from_fn(10, 10, |_, y| y < 5);
        assert_eq!(iou(&left, &top).unwrap(), 25.0 / 75.0);
        assert_eq!(iou(&left, &left).unwrap(), 1.0);
        let right = BitMask::from_fn(10, 10, |x, _| x >= 5);
        assert_eq!(iou(&left, &right).unwrap(), 0.0);
        let empty = BitMask::new(10, 10);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &left).unwrap(), 0.0);
        assert!(iou(&empty, &BitMask::new(9, 10)).is_err());
    }

    #[test]
    fn pooled_differs_from_mean() {
        let mk = |img: &str, i, u| RunRecord {
            image_id: img.into(),
            part_class: "p".into(),
            variant: "v".into(),
            counts: IouCounts { intersection: i, union: u },
        };
        let report = variant_table(&[mk("a", 1, 2), mk("b", 9, 10)]).unwrap();
        assert_eq!(report.pooled.values[0][0], 10.0 / 12.0);
        assert_eq!(report.per_image_mean.values[0][0], (0.5 + 0.9) / 2.0);
        let single = variant_table(&[mk("a", 3, 7)]).unwrap();
        assert_eq!(single.pooled.values, single.per_image_mean.values);
        assert_eq!(read_runs_csv(&report.per_image_csv()).unwrap(), report.per_image);
    }

    #[test]
    fn missing_cell_is_reported() {
        let mk = |p: &str, v: &str| RunRecord {
            image_id: "a".into(),
            part_class: p.into(),
            variant: v.into(),
            counts: IouCounts::default(),
        };
        let err = variant_table(&[mk("p", "x"), mk("q", "y")]).unwrap_err();
        assert!(matches!(err, EvalError::MissingCell { .. }));
    }

    #[test]
    fn csv_round_trip_and_text_marks() {
        let t = VariantTable::new(
            vec!["a".into(), "b".into()],
            vec!["X".into(), "Y".into()],
            vec![vec![0.5, 0.25], vec![0.125, 0.75]],
        )
        .unwrap();
        let csv = t.to_csv(6);
        assert!(csv.ends_with("average,0.312500,0.500000\n"));
        assert_eq!(VariantTable::from_csv_str(&csv).unwrap(), t);
        let text = t.to_text(3);
        assert!(text.contains("0.500*"));
        assert!(text.contains("0.750*"));
        assert_eq!(t.best_column(), 1);
    }

    #[test]
    fn single_cell_table() {
        let t = VariantTable::from_csv_str("part,LGSAM\nwheel,0.7\n").unwrap();
        assert_eq!(t.averages(), vec![0.7]);
    }

    #[test]
    fn config_hash_is_stable() {
        assert_eq!(config_hash(&(1, "a")), config_hash(&(1, "a")));
        assert_ne!(config_hash(&(1, "a")), config_hash(&(2, "a")));
        assert_eq!(config_hash(&0).len(), 16);
    }
}
