//! From per-patch confidences to prompted regions of interest, and from
//! regions to masks through a segmentation backend.

mod backend;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::classifier::{ClassifierError, GuidanceModel};
use crate::dataset::{DatasetError, FeatureBlob};
use crate::geometry::PixelBox;
use crate::patchgrid::PatchGrid;

pub use backend::{
    segment, segment_regions, serve_lines, BackendRouter, BoxFillBackend, HttpBackend, PerPart, OracleBackend, ProcessBackend, PromptOracleBackend,
    RegionFailure, SegmentationBackend, SegmentationOutcome, SegmentationRequest, SegmentationResponse, StreamBackend,
    TcpBackend,
};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// The six ways of turning guidance into a segmentation.
///
/// The first three operate on grouped regions of interest; the `Patch*`
/// variants treat every selected patch as its own region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Region, text prompt (grounded segmenter).
    #[serde(rename = "GGSAM")]
    Ggsam,
    /// Region, point prompt at the region center.
    #[serde(rename = "CGSAM")]
    Cgsam,
    /// Region, point prompt at the most confident patch center.
    #[serde(rename = "LGSAM")]
    Lgsam,
    /// Patch, the patch itself is the mask.
    #[serde(rename = "PatchNaive")]
    PatchNaive,
    /// Patch, text prompt.
    #[serde(rename = "PatchGGSAM")]
    PatchGgsam,
    /// Patch, point prompt at the patch center.
    #[serde(rename = "PatchCGSAM")]
    PatchCgsam,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ggsam,
        Variant::Cgsam,
        Variant::Lgsam,
        Variant::PatchNaive,
        Variant::PatchGgsam,
        Variant::PatchCgsam,
    ];

    /// Region variants in the order used to break selection ties.
    pub const ROI: [Variant; 3] = [Variant::Ggsam, Variant::Cgsam, Variant::Lgsam];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ggsam => "GGSAM",
            Variant::Cgsam => "CGSAM",
            Variant::Lgsam => "LGSAM",
            Variant::PatchNaive => "PatchNaive",
            Variant::PatchGgsam => "PatchGGSAM",
            Variant::PatchCgsam => "PatchCGSAM",
        }
    }

    pub fn is_region(self) -> bool {
        matches!(self, Variant::Ggsam | Variant::Cgsam | Variant::Lgsam)
    }

    pub fn uses_backend(self) -> bool {
        self != Variant::PatchNaive
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    /// Case-insensitive; `-` and `_` are ignored (`patch-cgsam`, `PatchCGSAM`).
    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// Positional or textual prompt. Serializes as `{"point":[x,y]}` or
/// `{"text":"..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prompt {
    Point([u32; 2]),
    Text(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Center of the most confident member patch.
    Likelihood,
    /// Center of the region box.
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedRegion {
    pub roi: PixelBox,
    pub prompt: Option<Prompt>,
    /// Patch indices, ascending.
    pub member_patches: Vec<u32>,
    pub peak_confidence: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("model has no support vectors")]
    UntrainedModel,
    #[error("model is for part '{model}', not '{requested}'")]
    ClassMismatch { model: String, requested: String },
    #[error("no confidence for patch {0}")]
    MissingConfidence(u32),
    #[error("region has no member patches")]
    EmptyRegion,
    #[error("backend error: {0}")]
    Backend(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Patch indices whose confidence strictly exceeds `threshold`.
pub fn threshold_patches(confidences: &[f64], threshold: f64) -> Vec<u32> {
    confidences
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > threshold)
        .map(|(i, _)| i as u32)
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Groups patches into connected components of the positive-area overlap
/// graph; each component's region is the bounding box of its members.
///
/// Output is sorted by region box, so it does not depend on input order.
/// Prompts are unset and `peak_confidence` is zero.
pub fn group_rois(patches: &[(u32, PixelBox)]) -> Vec<PromptedRegion> {
    let n = patches.len();
    let mut uf = UnionFind::new(n);
    for a in 0..n {
        for b in a + 1..n {
            if patches[a].1.overlaps(&patches[b].1) {
                uf.union(a, b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let mut regions: Vec<PromptedRegion> = groups
        .into_values()
        .map(|members| {
            let roi = members.iter().skip(1).fold(patches[members[0]].1, |acc, &m| acc.hull(&patches[m].1));
            let mut member_patches: Vec<u32> = members.iter().map(|&m| patches[m].0).collect();
            member_patches.sort_unstable();
            PromptedRegion { roi, prompt: None, member_patches, peak_confidence: 0.0 }
        })
        .collect();
    regions.sort_by(|a, b| {
        (a.roi.x0, a.roi.y0, a.roi.x1, a.roi.y1, a.member_patches[0])
            .cmp(&(b.roi.x0, b.roi.y0, b.roi.x1, b.roi.y1, b.member_patches[0]))
    });
    regions
}

fn confidence_of(confidences: &[f64], index: u32) -> Result<f64, GuidanceError> {
    confidences
        .get(index as usize)
        .copied()
        .filter(|c| !c.is_nan())
        .ok_or(GuidanceError::MissingConfidence(index))
}

/// Sets the region's point prompt and peak confidence.
///
/// Ties for the most confident member go to the lowest patch index.
pub fn infer_prompt(
    mut region: PromptedRegion,
    grid: &PatchGrid,
    confidences: &[f64],
    mode: PromptMode,
) -> Result<PromptedRegion, GuidanceError> {
    let mut best: Option<(u32, f64)> = None;
    for &m in &region.member_patches {
        let c = confidence_of(confidences, m)?;
        if best.is_none_or(|(bi, bc)| c > bc || (c == bc && m < bi)) {
            best = Some((m, c));
        }
    }
    let (best_index, peak) = best.ok_or(GuidanceError::EmptyRegion)?;
    let (x, y) = match mode {
        PromptMode::Likelihood => grid
            .patch(best_index)
            .ok_or(GuidanceError::MissingConfidence(best_index))?
            .bbox
            .center(),
        PromptMode::Center => region.roi.center(),
    };
    region.prompt = Some(Prompt::Point([x, y]));
    region.peak_confidence = peak;
    Ok(region)
}

/// Builds the regions a variant would send to the segmenter, given
/// precomputed per-patch confidences.
pub fn regions_from_confidences(
    grid: &PatchGrid,
    confidences: &[f64],
    part_class: &str,
    variant: Variant,
    threshold: f64,
) -> Result<Vec<PromptedRegion>, GuidanceError> {
    let selected = threshold_patches(confidences, threshold);
    let boxed: Vec<(u32, PixelBox)> = selected
        .iter()
        .map(|&i| grid.patch(i).map(|p| (i, p.bbox)).ok_or(GuidanceError::MissingConfidence(i)))
        .collect::<Result<_, _>>()?;

    if variant.is_region() {
        group_rois(&boxed)
            .into_iter()
            .map(|r| {
                let mode = if variant == Variant::Cgsam { PromptMode::Center } else { PromptMode::Likelihood };
                let mut r = infer_prompt(r, grid, confidences, mode)?;
                if variant == Variant::Ggsam {
                    r.prompt = Some(Prompt::Text(part_class.to_string()));
                }
                Ok(r)
            })
            .collect()
    } else {
        boxed
            .into_iter()
            .map(|(i, bbox)| {
                let prompt = match variant {
                    Variant::PatchCgsam => Some(Prompt::Point(<[u32; 2]>::from(bbox.center()))),
                    Variant::PatchGgsam => Some(Prompt::Text(part_class.to_string())),
                    _ => None,
                };
                Ok(PromptedRegion {
                    roi: bbox,
                    prompt,
                    member_patches: vec![i],
                    peak_confidence: confidence_of(confidences, i)?,
                })
            })
            .collect()
    }
}

/// Confidence of every patch of `grid`, indexed by patch index.
pub fn patch_confidences(
    grid: &PatchGrid,
    features: &FeatureBlob,
    model: &GuidanceModel,
) -> Result<Vec<f64>, GuidanceError> {
    if model.support_count() == 0 {
        return Err(GuidanceError::UntrainedModel);
    }
    grid.patches
        .iter()
        .map(|p| {
            let x = features.require(&grid.image_id, p.index)?;
            Ok(model.predict(x)?)
        })
        .collect()
}

/// Full guidance for one image and part: classify patches, threshold, and
/// build the variant's prompted regions.
pub fn run_guidance(
    grid: &PatchGrid,
    features: &FeatureBlob,
    part_class: &str,
    model: &GuidanceModel,
    variant: Variant,
    threshold: f64,
) -> Result<Vec<PromptedRegion>, GuidanceError> {
    if model.part_class != part_class {
        return Err(GuidanceError::ClassMismatch {
            model: model.part_class.clone(),
            requested: part_class.to_string(),
        });
    }
    let confidences = patch_confidences(grid, features, model)?;
    regions_from_confidences(grid, &confidences, part_class, variant, threshold)
}

/// Runs several variants over one image, classifying patches once.
///
/// Outcomes come back in the order of `variants`.
#[allow(clippy::too_many_arguments)]
pub fn segment_variants(
    grid: &PatchGrid,
    features: &FeatureBlob,
    part_class: &str,
    model: &GuidanceModel,
    variants: &[Variant],
    threshold: f64,
    backend: &dyn SegmentationBackend,
    max_in_flight: usize,
) -> Result<Vec<(Variant, Vec<PromptedRegion>, SegmentationOutcome)>, GuidanceError> {
    if model.part_class != part_class {
        return Err(GuidanceError::ClassMismatch {
            model: model.part_class.clone(),
            requested: part_class.to_string(),
        });
    }
    let confidences = patch_confidences(grid, features, model)?;
    variants
        .iter()
        .map(|&v| {
            let regions = regions_from_confidences(grid, &confidences, part_class, v, threshold)?;
            if regions.is_empty() {
                log::info!("{}: no regions for '{part_class}' with {v} at threshold {threshold}", grid.image_id);
            }
            let outcome =
                segment_regions(&grid.image_id, grid.width, grid.height, &regions, v, backend, max_in_flight);
            Ok((v, regions, outcome))
        })
        .collect()
}
