//! Per-part variant selection: full-information fusion and the sampled
//! selection experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

use super::{EvalError, IouCounts, RunRecord, VariantTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSelection {
    pub candidates: Vec<String>,
    /// `(part, chosen variant)` in table row order.
    pub picks: Vec<(String, String)>,
    /// Images the choice was made on; `None` for full information.
    pub sample_size: Option<usize>,
    pub seeds: Vec<u64>,
    pub average: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Index of the largest value; ties go to the earliest index.
fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Picks, for every part, the best of `candidates`. Ties go to the
/// candidate listed first.
pub fn fuse_best_per_part(table: &VariantTable, candidates: &[&str]) -> Result<FusionSelection, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::Table("no candidate variants".into()));
    }
    let sub = table.select(candidates)?;
    let mut picks = Vec::with_capacity(sub.parts.len());
    let (mut sum, mut lo, mut hi) = (0.0, 0.0, 0.0);
    for (part, row) in sub.parts.iter().zip(&sub.values) {
        let best = argmax(row.iter().copied());
        picks.push((part.clone(), sub.columns[best].clone()));
        sum += row[best];
        hi += row[best];
        lo += row.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let n = sub.parts.len() as f64;
    Ok(FusionSelection {
        candidates: sub.columns,
        picks,
        sample_size: None,
        seeds: Vec::new(),
        average: sum / n,
        lower: lo / n,
        upper: hi / n,
    })
}

/// Per-image counts for every (part, variant), the input of the selection
/// experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionData {
    pub images: Vec<String>,
    pub parts: Vec<String>,
    /// Candidate variants in tie-breaking order.
    pub variants: Vec<String>,
    counts: Vec<IouCounts>,
}

impl SelectionData {
    /// `counts[image][part][variant]`.
    pub fn new(
        images: Vec<String>,
        parts: Vec<String>,
        variants: Vec<String>,
        counts: Vec<Vec<Vec<IouCounts>>>,
    ) -> Result<Self, EvalError> {
        if images.is_empty() || parts.is_empty() || variants.is_empty() {
            return Err(EvalError::Table("selection data needs images, parts and variants".into()));
        }
        let shaped = counts.len() == images.len()
            && counts.iter().all(|p| p.len() == parts.len() && p.iter().all(|v| v.len() == variants.len()));
        if !shaped {
            return Err(EvalError::Table("count grid does not match labels".into()));
        }
        Ok(Self { images, parts, variants, counts: counts.into_iter().flatten().flatten().collect() })
    }

    /// Collects the cells for `variants` out of evaluation runs; other
    /// variants are ignored.
    pub fn from_runs(runs: &[RunRecord], variants: &[&str]) -> Result<Self, EvalError> {
        let mut images: Vec<String> = Vec::new();
        let mut parts: Vec<String> = Vec::new();
        let mut cells: HashMap<(&str, &str, &str), IouCounts> = HashMap::new();
        for r in runs {
            if !variants.contains(&r.variant.as_str()) {
                continue;
            }
            if !images.contains(&r.image_id) {
                images.push(r.image_id.clone());
            }
            if !parts.contains(&r.part_class) {
                parts.push(r.part_class.clone());
            }
            cells.entry((&r.image_id, &r.part_class, &r.variant)).or_default().add(r.counts);
        }
        let mut grid = Vec::with_capacity(images.len());
        for img in &images {
            let mut per_part = Vec::with_capacity(parts.len());
            for part in &parts {
                let row = variants
                    .iter()
                    .map(|v| {
                        cells.get(&(img.as_str(), part.as_str(), *v)).copied().ok_or_else(|| EvalError::MissingCell {
                            part: format!("{part} on {img}"),
                            variant: v.to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                per_part.push(row);
            }
            grid.push(per_part);
        }
        Self::new(images, parts, variants.iter().map(|v| v.to_string()).collect(), grid)
    }

    fn cell(&self, image: usize, part: usize, variant: usize) -> IouCounts {
        self.counts[(image * self.parts.len() + part) * self.variants.len() + variant]
    }

    /// Pooled IoU of one (part, variant) over a subset of images.
    pub fn pooled(&self, images: &[usize], part: usize, variant: usize) -> f64 {
        let mut acc = IouCounts::default();
        for &i in images {
            acc.add(self.cell(i, part, variant));
        }
        acc.iou()
    }

    /// Pooled table over all images.
    pub fn full_table(&self) -> VariantTable {
        let all: Vec<usize> = (0..self.images.len()).collect();
        let values = (0..self.parts.len())
            .map(|p| (0..self.variants.len()).map(|v| self.pooled(&all, p, v)).collect())
            .collect();
        VariantTable { parts: self.parts.clone(), columns: self.variants.clone(), values }
    }

    /// Per-part choices made on `sample`.
    pub fn choose(&self, sample: &[usize]) -> Vec<usize> {
        (0..self.parts.len())
            .map(|p| argmax((0..self.variants.len()).map(|v| self.pooled(sample, p, v))))
            .collect()
    }

    /// Average over parts of the full-set IoU of the chosen variants.
    pub fn evaluate_choice(&self, choice: &[usize]) -> f64 {
        let all: Vec<usize> = (0..self.images.len()).collect();
        choice.iter().enumerate().map(|(p, &v)| self.pooled(&all, p, v)).sum::<f64>() / self.parts.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPoint {
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCurve {
    pub candidates: Vec<String>,
    pub images: usize,
    pub lower: f64,
    pub upper: f64,
    pub seed: u64,
    pub repetitions: usize,
    pub points: Vec<SelectionPoint>,
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SelectionCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mean,std_error,min,max,lower,upper\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                p.n, p.mean, p.std_error, p.min, p.max, self.lower, self.upper
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "selection over {} ({} images, {} repetitions, seed {})\nlower {:.3}  upper {:.3}\n",
            self.candidates.join(", "),
            self.images,
            self.repetitions,
            self.seed,
            self.lower,
            self.upper
        );
        for p in &self.points {
            let _ = writeln!(out, "n={:<4} mean {:.3} ± {:.3}  [{:.3}, {:.3}]", p.n, p.mean, p.std_error, p.min, p.max);
        }
        out.push_str("note: choices are scored on the full set, which includes the sampled images\n");
        out
    }
}

/// For every sample size: draw `n` images without replacement, choose the
/// best variant per part on the draw, score the choice on the full set.
///
/// Repetition `r` uses seed `seed + r`, with the sample size as the
/// generator stream, so every cell is reproducible on its own.
pub fn selection_experiment(
    data: &SelectionData,
    sample_sizes: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<SelectionCurve, EvalError> {
    if repetitions == 0 {
        return Err(EvalError::ZeroSize);
    }
    let available = data.images.len();
    for &n in sample_sizes {
        if n == 0 {
            return Err(EvalError::ZeroSize);
        }
        if n > available {
            return Err(EvalError::SampleTooLarge { n, available });
        }
    }
    let full = data.full_table();
    let lower = full.values.iter().map(|r| r.iter().cloned().fold(f64::INFINITY, f64::min)).sum::<f64>()
        / full.parts.len() as f64;
    let upper = full.values.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>()
        / full.parts.len() as f64;

    let mut points = Vec::with_capacity(sample_sizes.len());
    for &n in sample_sizes {
        let mut values = Vec::with_capacity(repetitions);
        let mut seeds = Vec::with_capacity(repetitions);
        for r in 0..repetitions {
            let s = seed.wrapping_add(r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rng.set_stream(n as u64);
            let mut sample = rand::seq::index::sample(&mut rng, available, n).into_vec();
            sample.sort_unstable();
            values.push(data.evaluate_choice(&data.choose(&sample)));
            seeds.push(s);
        }
        let (mean, std_error) = mean_and_se(&values);
        points.push(SelectionPoint {
            n,
            mean,
            std_error,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            values,
            seeds,
        });
    }
    Ok(SelectionCurve {
        candidates: data.variants.clone(),
        images: available,
        lower,
        upper,
        seed,
        repetitions,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, [f64; 3])]) -> VariantTable {
        VariantTable::new(
            rows.iter().map(|r| r.0.to_string()).collect(),
            vec!["A".into(), "B".into(), "C".into()],
            rows.iter().map(|r| r.1.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dominant_variant_is_chosen_everywhere() {
        let t = table(&[("p", [0.2, 0.9, 0.1]), ("q", [0.3, 0.4, 0.35])]);
        let f = fuse_best_per_part(&t, &["A", "B", "C"]).unwrap();
        assert!(f.picks.iter().all(|(_, v)| v == "B"));
        assert_eq!(f.average, f.upper);
        assert!(f.average >= t.average(0) && f.average >= t.average(2));
    }

    #[test]
    fn identical_variants_tie_to_first() {
        let t = table(&[("p", [0.5, 0.5, 0.5])]);
        let f = fuse_best_per_part(&t, &["C", "B"]).unwrap();
        assert_eq!(f.picks[0].1, "C");
        assert_eq!(f.average, 0.5);
        assert_eq!(f.lower, f.upper);
    }

    #[test]
    fn unknown_candidate_rejected() {
        let t = table(&[("p", [0.5, 0.5, 0.5])]);
        assert!(matches!(fuse_best_per_part(&t, &["Z"]), Err(EvalError::UnknownColumn(_))));
    }

    fn counts(i: u64, u: u64) -> IouCounts {
        IouCounts { intersection: i, union: u }
    }

    #[test]
    fn full_sample_hits_upper_bound_with_zero_variance() {
        let data = SelectionData::new(
            (0..4).map(|i| format!("i{i}")).collect(),
            vec!["p".into(), "q".into()],
            vec!["A".into(), "B".into()],
            (0..4u64)
                .map(|i| vec![vec![counts(i, 10), counts(10 - i, 10)], vec![counts(3, 9), counts(i * 2, 9)]])
                .collect(),
        )
        .unwrap();
        let curve = selection_experiment(&data, &[1, 2, 4], 5, 11).unwrap();
        let last = curve.points.last().unwrap();
        assert!(last.values.iter().all(|v| *v == curve.upper));
        assert_eq!(last.std_error, 0.0);
        for p in &curve.points {
            assert!(p.min >= curve.lower - 1e-12 && p.max <= curve.upper + 1e-12);
        }
        assert!(matches!(selection_experiment(&data, &[5], 1, 0), Err(EvalError::SampleTooLarge { .. })));
        assert!(matches!(selection_experiment(&data, &[0], 1, 0), Err(EvalError::ZeroSize)));
    }

    #[test]
    fn experiment_is_reproducible() {
        let data = SelectionData::new(
            (0..6).map(|i| format!("i{i}")).collect(),
            vec!["p".into()],
            vec!["A".into(), "B".into()],
            (0..6u64).map(|i| vec![vec![counts(i, 6), counts(5 - i, 6)]]).collect(),
        )
        .unwrap();
        let a = selection_experiment(&data, &[1, 2, 3], 10, 5).unwrap();
        let b = selection_experiment(&data, &[1, 2, 3], 10, 5).unwrap();
        assert_eq!(a, b);
    }
}
