//! IoU against the number of annotated training images, on the synthetic
//! benchmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::fusion::mean_and_se;
use super::{config_hash, fuse_best_per_part, report_header, variant_table, EvalError, IouCounts, RunRecord};
use crate::classifier::{train_on_patches, GuidanceModel, TrainConfig};
use crate::dataset::{BitMask, FeatureBlob};
use crate::guidance::{segment_variants, BackendRouter, Variant};
use crate::patchgrid::PatchGrid;
use crate::synthetic::{SyntheticBenchmark, PARTS};

/// Column name of the per-part best region variant.
pub const FUSED: &str = "Fused";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub threshold: f64,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    /// Worker threads; 0 picks the available parallelism. Does not affect results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 4, 8, 16, 32, 64],
            repetitions: 10,
            seed: 0,
            threshold: crate::guidance::DEFAULT_THRESHOLD,
            variants: Variant::ALL.to_vec(),
            train: TrainConfig { max_samples: Some(1500), ..TrainConfig::default() },
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub variant: String,
    pub mean: f64,
    pub std_error: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub seed: u64,
    pub config_hash: String,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn point(&self, size: usize, variant: &str) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.size == size && p.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = report_header(self.seed, &self.config_hash, &[]);
        out.push_str("size,variant,mean,std_error,min,max\n");
        for p in &self.points {
            let min = p.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = p.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.6}", p.size, p.variant, p.mean, p.std_error, min, max);
        }
        out
    }
}

/// Evaluates trained models on images with known ground truth. Records are
/// ordered by image, then part (model key order), then variant.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_models(
    images: &[(&PatchGrid, &BTreeMap<String, BitMask>)],
    features: &FeatureBlob,
    models: &BTreeMap<String, GuidanceModel>,
    variants: &[Variant],
    threshold: f64,
    backends: &dyn BackendRouter,
    max_in_flight: usize,
) -> Result<Vec<RunRecord>, crate::Error> {
    let mut runs = Vec::new();
    for (grid, gt) in images {
        for (part, model) in models {
            let truth = gt.get(part).cloned().unwrap_or_else(|| BitMask::new(grid.width, grid.height));
            let backend = backends.backend_for(part)?;
            let outcomes = segment_variants(grid, features, part, model, variants, threshold, backend, max_in_flight)?;
            for (v, _, outcome) in outcomes {
                runs.push(RunRecord {
                    image_id: grid.image_id.clone(),
                    part_class: part.clone(),
                    variant: v.name().to_string(),
                    counts: IouCounts::of(&outcome.mask, &truth)?,
                });
            }
        }
    }
    Ok(runs)
}

fn run_once(
    bench: &SyntheticBenchmark,
    backend: &dyn BackendRouter,
    config: &CurveConfig,
    size: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>, crate::Error> {
    let train = bench.train_images();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(size as u64);
    let mut picked = rand::seq::index::sample(&mut rng, train.len(), size).into_vec();
    picked.sort_unstable();

    let mut models = BTreeMap::new();
    for part in PARTS {
        let mut labels = Vec::new();
        for &i in &picked {
            labels.extend(bench.patch_labels(&train[i], part)?);
        }
        let cfg = TrainConfig { seed, ..config.train.clone() };
        models.insert(part.to_string(), train_on_patches(part, &labels, &bench.features, &cfg)?);
    }
    let eval: Vec<(&PatchGrid, &BTreeMap<String, BitMask>)> =
        bench.eval_images().iter().map(|img| (&img.grid, &img.masks)).collect();
    let runs = evaluate_models(&eval, &bench.features, &models, &config.variants, config.threshold, backend, 1)?;
    let report = variant_table(&runs)?;
    let mut out: Vec<(String, f64)> =
        report.pooled.columns.iter().cloned().zip(report.pooled.averages()).collect();
    let roi: Vec<&str> = Variant::ROI.iter().map(|v| v.name()).filter(|v| report.pooled.columns.iter().any(|c| c == v)).collect();
    if !roi.is_empty() {
        out.push((FUSED.to_string(), fuse_best_per_part(&report.pooled, &roi)?.average));
    }
    Ok(out)
}

/// For every size and repetition: sample that many training images, train
/// one classifier per part on their patch labels, run every variant on the
/// held-out images and record the average pooled IoU. The fused column
/// picks the best region variant per part on the held-out set itself.
///
/// Repetition `r` uses seed `seed + r`; results do not depend on the
/// number of workers.
pub fn label_efficiency_curve(
    bench: &SyntheticBenchmark,
    backend: &dyn BackendRouter,
    config: &CurveConfig,
) -> Result<LearningCurve, crate::Error> {
    let available = bench.train_images().len();
    if config.sizes.is_empty() || config.repetitions == 0 {
        return Err(EvalError::ZeroSize.into());
    }
    for &n in &config.sizes {
        if n == 0 {
            return Err(EvalError::ZeroSize.into());
        }
        if n > available {
            return Err(EvalError::SampleTooLarge { n, available }.into());
        }
    }
    if bench.eval_images().is_empty() {
        return Err(EvalError::Table("benchmark has no held-out images".into()).into());
    }

    let jobs: Vec<(usize, usize)> =
        (0..config.sizes.len()).flat_map(|s| (0..config.repetitions).map(move |r| (s, r))).collect();
    let results: Vec<Mutex<Option<Result<Vec<(String, f64)>, crate::Error>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = match config.workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        w => w,
    }
    .min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(s, r)) = jobs.get(j) else { break };
                let seed = config.seed.wrapping_add(r as u64);
                let res = run_once(bench, backend, config, config.sizes[s], seed);
                *results[j].lock().unwrap_or_else(|e| e.into_inner()) = Some(res);
            });
        }
    });

    let mut per_size: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); config.sizes.len()];
    let mut column_order: Vec<String> = Vec::new();
    for (slot, &(s, _)) in results.into_iter().zip(&jobs) {
        let res = slot
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .unwrap_or_else(|| Err(EvalError::Table("job did not run".into()).into()))?;
        for (name, v) in res {
            if !column_order.contains(&name) {
                column_order.push(name.clone());
            }
            per_size[s].entry(name).or_default().push(v);
        }
    }
    let mut points = Vec::new();
    for (s, &size) in config.sizes.iter().enumerate() {
        for name in &column_order {
            let values = per_size[s].remove(name).unwrap_or_default();
            let (mean, std_error) = mean_and_se(&values);
            points.push(CurvePoint { size, variant: name.clone(), mean, std_error, values });
        }
    }
    Ok(LearningCurve {
        seed: config.seed,
        config_hash: config_hash(&(config, &bench.config)),
        points,
    })
}
