//! Per-part guidance classifier: an RBF-kernel SVM trained by SMO, with
//! Platt-scaled confidences, plus ROC AUC.

mod auc;
pub mod platt;
pub mod smo;

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{FeatureBlob, PatchKey};
pub use auc::auc;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("training data must contain both positive and negative samples")]
    SingleClass,
    #[error("training data is empty")]
    Empty,
    #[error("feature dimension {found} does not match expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("solver left an infeasible dual solution (violation {0:e})")]
    Infeasible(f64),
    #[error("model file {path}: {message}")]
    Format { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

/// RBF width: fixed, or `1 / (dim · variance of all feature values)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Value(f64),
    Auto(AutoTag),
}

impl Gamma {
    pub const AUTO: Gamma = Gamma::Auto(AutoTag::Auto);
}

impl std::str::FromStr for Gamma {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Gamma::AUTO);
        }
        s.parse::<f64>()
            .ok()
            .filter(|g| *g > 0.0 && g.is_finite())
            .map(Gamma::Value)
            .ok_or_else(|| format!("gamma must be 'auto' or a positive number, got '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub c: f64,
    pub gamma: Gamma,
    pub tolerance: f64,
    /// Iteration cap, in units of the number of training samples.
    pub max_passes: usize,
    pub seed: u64,
    /// Scale the positive box constraint by `#neg / #pos`.
    pub balance_classes: bool,
    /// Stratified cap on the training set size; negatives are dropped first.
    pub max_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: Gamma::AUTO,
            tolerance: 1e-3,
            max_passes: 200,
            seed: 0,
            balance_classes: true,
            max_samples: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |what: &str| Err(ClassifierError::Config(what.to_string()));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("C must be positive");
        }
        if let Gamma::Value(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return bad("gamma must be positive");
            }
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_passes == 0 {
            return bad("max_passes must be positive");
        }
        if self.max_samples == Some(0) {
            return bad("max_samples must be positive");
        }
        Ok(())
    }
}

/// Trained guidance classifier for one part class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceModel {
    pub part_class: String,
    pub feature_dim: usize,
    /// Support vectors, row-major, `dual_coefficients.len()` rows.
    #[serde(skip)]
    pub support_vectors: Vec<f32>,
    /// `α_i · y_i` per support vector.
    pub dual_coefficients: Vec<f64>,
    pub bias: f64,
    pub kernel_gamma: f64,
    pub platt_a: f64,
    pub platt_b: f64,
    pub c_positive: f64,
    pub c_negative: f64,
    pub kkt_gap: f64,
    pub converged: bool,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| {
        let d = *x as f64 - *y as f64;
        d * d
    }).sum()
}

struct RbfKernel<'a> {
    rows: &'a [&'a [f32]],
    gamma: f64,
}

impl smo::KernelSource for RbfKernel<'_> {
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn eval(&self, i: usize, j: usize) -> f64 {
        (-self.gamma * sq_dist(self.rows[i], self.rows[j])).exp()
    }
}

fn auto_gamma(rows: &[&[f32]], dim: usize) -> f64 {
    let n = (rows.len() * dim) as f64;
    let mean = rows.iter().flat_map(|r| r.iter()).map(|&v| v as f64).sum::<f64>() / n;
    let var = rows.iter().flat_map(|r| r.iter()).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (dim as f64 * var)
    } else {
        1.0
    }
}

/// Stratified subsample: keeps up to half the budget of positives, fills the
/// rest with negatives (and positives if negatives run out).
fn subsample(labels: &[bool], cap: usize, seed: u64) -> Vec<usize> {
    if labels.len() <= cap {
        return (0..labels.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let take_pos = pos.len().min((cap / 2).max(cap.saturating_sub(neg.len())));
    let take_neg = neg.len().min(cap - take_pos);
    let mut idx: Vec<usize> = pos[..take_pos].iter().chain(&neg[..take_neg]).copied().collect();
    idx.sort_unstable();
    idx
}

/// Trains a model from `(feature, label)` pairs.
pub fn train(
    part_class: &str,
    samples: &[(&[f32], bool)],
    config: &TrainConfig,
) -> Result<GuidanceModel, ClassifierError> {
    config.validate()?;
    let Some(first) = samples.first() else {
        return Err(ClassifierError::Empty);
    };
    let dim = first.0.len();
    for (x, _) in samples {
        if x.len() != dim {
            return Err(ClassifierError::DimensionMismatch { expected: dim, found: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ClassifierError::NonFinite);
        }
    }
    let all_labels: Vec<bool> = samples.iter().map(|s| s.1).collect();
    let keep = match config.max_samples {
        Some(cap) => subsample(&all_labels, cap, config.seed),
        None => (0..samples.len()).collect(),
    };
    let rows: Vec<&[f32]> = keep.iter().map(|&i| samples[i].0).collect();
    let labels: Vec<bool> = keep.iter().map(|&i| samples[i].1).collect();
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ClassifierError::SingleClass);
    }

    let gamma = match config.gamma {
        Gamma::Value(g) => g,
        Gamma::Auto(_) => auto_gamma(&rows, dim),
    };
    let c_pos = if config.balance_classes { config.c * n_neg as f64 / n_pos as f64 } else { config.c };
    let c_neg = config.c;
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let bounds: Vec<f64> = labels.iter().map(|&l| if l { c_pos } else { c_neg }).collect();

    let kernel = RbfKernel { rows: &rows, gamma };
    let n = rows.len();
    let params = smo::SmoParams {
        tolerance: config.tolerance,
        max_iterations: config.max_passes.saturating_mul(n.max(1)),
        cache_rows: (8_000_000 / n.max(1)).clamp(2, n.max(2)),
    };
    let sol = smo::solve(&kernel, &y, &bounds, &params);
    let violation = smo::feasibility_violation(&sol.alpha, &y, &bounds);
    if violation > 1e-8 * (1.0 + c_pos.max(c_neg) * n as f64) {
        return Err(ClassifierError::Infeasible(violation));
    }
    if !sol.converged {
        log::warn!(
            "SMO for '{part_class}' stopped after {} iterations with KKT gap {:.2e}",
            sol.iterations,
            sol.kkt_gap
        );
    }

    let decisions = smo::training_decisions(&kernel, &y, &sol, params.cache_rows);
    let (platt_a, platt_b) = platt::fit(&decisions, &labels);

    let mut support_vectors = Vec::new();
    let mut dual_coefficients = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.extend_from_slice(rows[i]);
            dual_coefficients.push(a * y[i]);
        }
    }
    Ok(GuidanceModel {
        part_class: part_class.to_string(),
        feature_dim: dim,
        support_vectors,
        dual_coefficients,
        bias: -sol.rho,
        kernel_gamma: gamma,
        platt_a,
        platt_b,
        c_positive: c_pos,
        c_negative: c_neg,
        kkt_gap: sol.kkt_gap,
        converged: sol.converged,
    })
}

/// Trains from labeled patch keys, looking features up in `features`.
pub fn train_on_patches(
    part_class: &str,
    labels: &[(PatchKey, bool)],
    features: &FeatureBlob,
    config: &TrainConfig,
) -> Result<GuidanceModel, crate::Error> {
    let mut samples = Vec::with_capacity(labels.len());
    for (key, label) in labels {
        samples.push((features.require(&key.image_id, key.index)?, *label));
    }
    Ok(train(part_class, &samples, config)?)
}

impl GuidanceModel {
    pub fn support_count(&self) -> usize {
        self.dual_coefficients.len()
    }

    pub fn support_vector(&self, i: usize) -> &[f32] {
        &self.support_vectors[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    fn check(&self, x: &[f32]) -> Result<(), ClassifierError> {
        if x.len() != self.feature_dim {
            return Err(ClassifierError::DimensionMismatch { expected: self.feature_dim, found: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ClassifierError::NonFinite);
        }
        Ok(())
    }

    /// Kernel decision value `Σ coef_i K(sv_i, x) + bias`.
    pub fn decision_value(&self, x: &[f32]) -> Result<f64, ClassifierError> {
        self.check(x)?;
        let mut s = self.bias;
        for (i, coef) in self.dual_coefficients.iter().enumerate() {
            s += coef * (-self.kernel_gamma * sq_dist(self.support_vector(i), x)).exp();
        }
        Ok(s)
    }

    /// Calibrated confidence in `[0, 1]` that the patch contains the part.
    pub fn predict(&self, x: &[f32]) -> Result<f64, ClassifierError> {
        let f = self.decision_value(x)?;
        Ok(platt::sigmoid(self.platt_a * f + self.platt_b))
    }

    /// Writes a JSON header line followed by the support vectors as a GSFV
    /// block.
    pub fn save(&self, path: &Path) -> Result<(), crate::Error> {
        let fmt_err = |message: String| ClassifierError::Format { path: path.display().to_string(), message };
        let mut blob = FeatureBlob::new(self.feature_dim);
        for i in 0..self.support_count() {
            blob.push(PatchKey::new("sv", i as u32), self.support_vector(i))?;
        }
        let header = serde_json::to_string(self).map_err(|e| fmt_err(e.to_string()))?;
        let mut out = Vec::with_capacity(header.len() + 1 + blob.encoded_len());
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&blob.to_bytes()?);
        let mut f = std::fs::File::create(path).map_err(|e| fmt_err(e.to_string()))?;
        f.write_all(&out).map_err(|e| fmt_err(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let fmt_err = |message: String| ClassifierError::Format { path: path.display().to_string(), message };
        let bytes = std::fs::read(path).map_err(|e| fmt_err(e.to_string()))?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err("missing header line".into()))?;
        let mut model: GuidanceModel =
            serde_json::from_slice(&bytes[..split]).map_err(|e| fmt_err(e.to_string()))?;
        let blob = FeatureBlob::from_bytes(&bytes[split + 1..])?;
        if blob.len() != model.dual_coefficients.len() || (!blob.is_empty() && blob.dim() != model.feature_dim) {
            return Err(fmt_err("support vector block does not match header".into()).into());
        }
        model.support_vectors = (0..blob.len()).flat_map(|i| blob.row_at(i).to_vec()).collect();
        Ok(model)
    }
}
