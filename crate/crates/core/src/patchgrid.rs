//! Overlapping square patch tiling and per-patch ground-truth labels.

use serde::{Deserialize, Serialize};

use crate::dataset::{BitMask, DatasetError, PatchKey};
use crate::geometry::PixelBox;

/// Default fraction of a patch shared with its neighbour.
pub const DEFAULT_OVERLAP: f64 = 0.5;
/// Default number of patches across the shorter image side.
pub const DEFAULT_DIVISOR: u32 = 14;
/// Default minimum mask coverage for a positive patch label.
pub const DEFAULT_COVERAGE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub divisor: u32,
    pub overlap: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { divisor: DEFAULT_DIVISOR, overlap: DEFAULT_OVERLAP }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub index: u32,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub stride: u32,
    /// Set when the image is smaller than the divisor and the grid fell back
    /// to a single full-image patch.
    #[serde(default)]
    pub degenerate: bool,
    pub patches: Vec<Patch>,
}

impl PatchGrid {
    pub fn key(&self, index: u32) -> PatchKey {
        PatchKey::new(self.image_id.clone(), index)
    }

    pub fn patch(&self, index: u32) -> Option<&Patch> {
        self.patches.get(index as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub image_id: String,
    pub part_class: String,
    pub label: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("divisor must be at least 1")]
    ZeroDivisor,
    #[error("overlap fraction {0} outside [0, 1)")]
    BadOverlap(f64),
    #[error("image has zero width or height")]
    EmptyImage,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Axis positions: `ceil((extent - size) / stride) + 1` starts, the last one
/// clamped to `extent - size` so the far border is always covered.
fn axis_starts(extent: u32, size: u32, stride: u32) -> Vec<u32> {
    let span = extent - size;
    let n = span.div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(span)).collect()
}

/// Tiles a `width × height` image into square patches of side
/// `round(min(W, H) / divisor)` with the given overlap, row-major.
pub fn build_grid(
    image_id: &str,
    width: u32,
    height: u32,
    divisor: u32,
    overlap: f64,
) -> Result<PatchGrid, GridError> {
    if divisor == 0 {
        return Err(GridError::ZeroDivisor);
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(GridError::BadOverlap(overlap));
    }
    if width == 0 || height == 0 {
        return Err(GridError::EmptyImage);
    }
    if width < divisor || height < divisor {
        log::warn!("image '{image_id}' ({width}x{height}) is smaller than divisor {divisor}; using one full-image patch");
        return Ok(PatchGrid {
            image_id: image_id.to_string(),
            width,
            height,
            patch_size: width.min(height),
            stride: width.min(height),
            degenerate: true,
            patches: vec![Patch { index: 0, bbox: PixelBox::new(0, 0, width, height) }],
        });
    }

    let size = ((width.min(height) as f64 / divisor as f64).round() as u32).max(1);
    let stride = ((size as f64 * (1.0 - overlap)).round() as u32).max(1);
    let xs = axis_starts(width, size, stride);
    let ys = axis_starts(height, size, stride);

    let mut patches = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            patches.push(Patch {
                index: patches.len() as u32,
                bbox: PixelBox::new(x, y, x + size, y + size),
            });
        }
    }
    Ok(PatchGrid {
        image_id: image_id.to_string(),
        width,
        height,
        patch_size: size,
        stride,
        degenerate: false,
        patches,
    })
}

/// Summed-area table over a binary mask for O(1) box counts.
pub struct CoverageTable {
    width: usize,
    sums: Vec<u32>,
}

impl CoverageTable {
    pub fn new(mask: &BitMask) -> Self {
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.get(x as u32, y as u32) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { width: w, sums }
    }

    pub fn count(&self, b: PixelBox) -> u64 {
        let s = |x: u32, y: u32| self.sums[y as usize * (self.width + 1) + x as usize] as i64;
        (s(b.x1, b.y1) - s(b.x0, b.y1) - s(b.x1, b.y0) + s(b.x0, b.y0)) as u64
    }

    pub fn coverage(&self, b: PixelBox) -> f64 {
        self.count(b) as f64 / b.area() as f64
    }
}

/// Labels each patch positive when at least `coverage_threshold` of its
/// pixels lie in the mask.
pub fn label_patches(
    grid: &PatchGrid,
    mask: &BitMask,
    part_class: &str,
    coverage_threshold: f64,
) -> Result<Vec<LabeledPatch>, GridError> {
    if mask.dims() != (grid.width, grid.height) {
        return Err(DatasetError::DimensionMismatch {
            expected: (grid.width, grid.height),
            found: mask.dims(),
        }
        .into());
    }
    let table = CoverageTable::new(mask);
    Ok(grid
        .patches
        .iter()
        .map(|p| LabeledPatch {
            patch: p.clone(),
            image_id: grid.image_id.clone(),
            part_class: part_class.to_string(),
            label: table.coverage(p.bbox) >= coverage_threshold,
        })
        .collect())
}
