//! A generated benchmark with known ground truth: small images containing
//! three geometric parts, noisy patch features that carry the per-part
//! coverage signal, and similarity scores loosely correlated with it.
//!
//! Each image applies its own gain and offset to the informative feature
//! dimensions, so a classifier trained on a few images generalizes worse
//! than one trained on many.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::guidance::{OracleBackend, PerPart, PromptOracleBackend};
use crate::dataset::{BitMask, DatasetError, FeatureBlob, ImageRecord, ManifestFile, PatchKey, SegmentMask, SimilarityScores};
use crate::patchgrid::{build_grid, label_patches, CoverageTable, GridError, PatchGrid, DEFAULT_COVERAGE};

pub const PARTS: [&str; 3] = ["disc", "bar", "wedge"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: u32,
    pub height: u32,
    pub divisor: u32,
    pub overlap: f64,
    pub train_images: usize,
    pub eval_images: usize,
    /// Standard deviation of per-patch noise on every feature dimension.
    pub noise: f64,
    /// Spread of the per-image gain applied to informative dimensions.
    pub gain_spread: f64,
    /// Standard deviation of the per-image offset on informative dimensions.
    pub offset_sd: f64,
    /// Pure-noise dimensions appended to every feature vector.
    pub distractor_dims: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 84,
            height: 84,
            divisor: 14,
            overlap: 0.5,
            train_images: 64,
            eval_images: 16,
            noise: 0.2,
            gain_spread: 0.5,
            offset_sd: 0.15,
            distractor_dims: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Per-part coverage, any-part coverage, then distractors.
    pub fn feature_dim(&self) -> usize {
        PARTS.len() + 1 + self.distractor_dims
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub id: String,
    pub grid: PatchGrid,
    /// Part class → ground-truth mask.
    pub masks: BTreeMap<String, BitMask>,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    /// Training images first, then evaluation images.
    pub images: Vec<SyntheticImage>,
    pub features: FeatureBlob,
    pub scores: SimilarityScores,
}

fn draw_disc(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BitMask {
    let r = rng.random_range(8.0..13.0);
    let cx = rng.random_range(r..w as f64 - r);
    let cy = rng.random_range(r..h as f64 - r);
    BitMask::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    })
}

fn draw_bar(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BitMask {
    let long = rng.random_range(24..40);
    let short = rng.random_range(6..10);
    let (bw, bh) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
    let x0 = rng.random_range(2..w - bw - 2);
    let y0 = rng.random_range(2..h - bh - 2);
    BitMask::from_fn(w, h, |x, y| x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh)
}

fn draw_wedge(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BitMask {
    let leg = rng.random_range(16..26) as i64;
    let x0 = rng.random_range(2..w as i64 - leg - 2);
    let y0 = rng.random_range(2..h as i64 - leg - 2);
    // Right triangle with the right angle at the bottom-left corner.
    BitMask::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as i64 - x0, y as i64 - y0);
        dx >= 0 && dy < leg && dx <= dy
    })
}

fn shape(class: &str, rng: &mut ChaCha8Rng, w: u32, h: u32) -> BitMask {
    match class {
        "disc" => draw_disc(rng, w, h),
        "bar" => draw_bar(rng, w, h),
        _ => draw_wedge(rng, w, h),
    }
}

impl SyntheticBenchmark {
    pub fn generate(config: &SyntheticConfig) -> Result<Self, GridError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let (w, h) = (config.width, config.height);
        let n = config.train_images + config.eval_images;
        let mut features = FeatureBlob::new(config.feature_dim());
        let mut scores = SimilarityScores::new();
        let mut images = Vec::with_capacity(n);

        for i in 0..n {
            let id = format!("syn{i:03}");
            let grid = build_grid(&id, w, h, config.divisor, config.overlap)?;
            let masks: BTreeMap<String, BitMask> =
                PARTS.iter().map(|&c| (c.to_string(), shape(c, &mut rng, w, h))).collect();
            let mut any = BitMask::new(w, h);
            for m in masks.values() {
                any.union_with(m)?;
            }
            let tables: Vec<CoverageTable> = PARTS.iter().map(|c| CoverageTable::new(&masks[*c])).collect();
            let any_table = CoverageTable::new(&any);
            let gains: Vec<f64> = (0..=PARTS.len())
                .map(|_| 1.0 + rng.random_range(-config.gain_spread..=config.gain_spread))
                .collect();
            let offsets: Vec<f64> = (0..=PARTS.len()).map(|_| config.offset_sd * unit.sample(&mut rng)).collect();

            let mut row = vec![0f32; config.feature_dim()];
            for p in &grid.patches {
                let mut cov: Vec<f64> = tables.iter().map(|t| t.coverage(p.bbox)).collect();
                cov.push(any_table.coverage(p.bbox));
                for (d, c) in cov.iter().enumerate() {
                    row[d] = (gains[d] * c + offsets[d] + config.noise * unit.sample(&mut rng)) as f32;
                }
                for v in row.iter_mut().skip(cov.len()) {
                    *v = (config.noise * unit.sample(&mut rng)) as f32;
                }
                let key = PatchKey::new(&id, p.index);
                features.push(key.clone(), &row)?;
                for (c, part) in PARTS.iter().enumerate() {
                    let s = (1.2 * cov[c] - 0.3 + 0.2 * unit.sample(&mut rng)).clamp(-1.0, 1.0);
                    scores.insert(key.clone(), part, s)?;
                }
            }
            images.push(SyntheticImage { id, grid, masks });
        }
        Ok(Self { config: config.clone(), images, features, scores })
    }

    pub fn train_images(&self) -> &[SyntheticImage] {
        &self.images[..self.config.train_images]
    }

    pub fn eval_images(&self) -> &[SyntheticImage] {
        &self.images[self.config.train_images..]
    }

    /// Patch labels of one image for one part at the default coverage threshold.
    pub fn patch_labels(&self, image: &SyntheticImage, part: &str) -> Result<Vec<(PatchKey, bool)>, GridError> {
        let mask = image.masks.get(part).ok_or_else(|| {
            GridError::Dataset(DatasetError::Manifest(format!("no part '{part}' in {}", image.id)))
        })?;
        Ok(label_patches(&image.grid, mask, part, DEFAULT_COVERAGE)?
            .into_iter()
            .map(|lp| (PatchKey::new(lp.image_id, lp.patch.index), lp.label))
            .collect())
    }

    fn masks_by_part(&self) -> BTreeMap<String, std::collections::HashMap<String, BitMask>> {
        PARTS
            .iter()
            .map(|&part| {
                let by_image = self.images.iter().map(|img| (img.id.clone(), img.masks[part].clone())).collect();
                (part.to_string(), by_image)
            })
            .collect()
    }

    /// Ground-truth oracles that ignore prompts, one per part.
    pub fn oracle_backends(&self) -> PerPart<OracleBackend> {
        PerPart {
            backends: self.masks_by_part().into_iter().map(|(p, masks)| (p, OracleBackend { masks })).collect(),
        }
    }

    /// Prompt-sensitive oracles, one per part.
    pub fn prompt_oracle_backends(&self) -> PerPart<PromptOracleBackend> {
        PerPart {
            backends: self
                .masks_by_part()
                .into_iter()
                .map(|(p, masks)| (p, PromptOracleBackend { masks }))
                .collect(),
        }
    }

    /// Writes a complete dataset directory: `manifest.json`, mask sidecars,
    /// grayscale PGM renders, `features.gsfv` and `similarity.csv`. Returns
    /// the manifest path.
    pub fn write_dataset(&self, dir: &Path) -> Result<PathBuf, DatasetError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| DatasetError::io(&p, e)
        };
        for sub in ["masks", "images"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(io(&d))?;
        }
        let mut records = Vec::new();
        for img in &self.images {
            let mut masks = BTreeMap::new();
            for (class, m) in &img.masks {
                let rel = PathBuf::from(format!("masks/{}_{class}.json", img.id));
                SegmentMask::from_bitmask(&img.id, class, m).write_json(&dir.join(&rel))?;
                masks.insert(class.clone(), rel);
            }
            let pixel_source = PathBuf::from(format!("images/{}.pgm", img.id));
            let path = dir.join(&pixel_source);
            std::fs::write(&path, render_pgm(img)).map_err(io(&path))?;
            records.push(ImageRecord {
                id: img.id.clone(),
                width: img.grid.width,
                height: img.grid.height,
                pixel_source,
                masks,
                polygon_vertices: BTreeMap::new(),
            });
        }
        let manifest = ManifestFile {
            dataset_id: format!("synthetic-{}", self.config.seed),
            part_classes: PARTS.iter().map(|s| s.to_string()).collect(),
            merge_table: BTreeMap::new(),
            images: records,
        };
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::json(&manifest_path, e))?;
        std::fs::write(&manifest_path, json).map_err(io(&manifest_path))?;
        self.features.write(&dir.join("features.gsfv"))?;
        self.scores.write_csv(&dir.join("similarity.csv"))?;
        Ok(manifest_path)
    }
}

fn render_pgm(img: &SyntheticImage) -> Vec<u8> {
    let (w, h) = (img.grid.width, img.grid.height);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let mut v = 32u8;
            for (i, m) in img.masks.values().enumerate() {
                if m.get(x, y) {
                    v = v.max(96 + 64 * i as u8);
                }
            }
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig { train_images: 3, eval_images: 1, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = SyntheticBenchmark::generate(&small()).unwrap();
        let b = SyntheticBenchmark::generate(&small()).unwrap();
        assert_eq!(a.features.to_bytes().unwrap(), b.features.to_bytes().unwrap());
        assert_eq!(a.images[2].masks, b.images[2].masks);
    }

    #[test]
    fn every_image_has_every_part_and_729_patches() {
        let bench = SyntheticBenchmark::generate(&small()).unwrap();
        assert_eq!(bench.images.len(), 4);
        for img in &bench.images {
            assert_eq!(img.grid.patches.len(), 729);
            for part in PARTS {
                assert!(img.masks[part].count() > 50, "{part} too small");
                let labels = bench.patch_labels(img, part).unwrap();
                assert!(labels.iter().any(|l| l.1) && labels.iter().any(|l| !l.1));
            }
        }
        assert_eq!(bench.features.len(), 4 * 729);
    }

    #[test]
    fn informative_dimension_separates_labels() {
        let bench = SyntheticBenchmark::generate(&small()).unwrap();
        let img = &bench.images[0];
        let labels = bench.patch_labels(img, "disc").unwrap();
        let mean = |want: bool| {
            let v: Vec<f64> = labels
                .iter()
                .filter(|l| l.1 == want)
                .map(|(k, _)| bench.features.row(&k.image_id, k.index).unwrap()[0] as f64)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false) + 0.3);
    }
}
