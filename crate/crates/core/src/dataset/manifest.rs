//! Dataset manifest: images, per-part mask sidecars and the class merge table.
//!
//! On disk the manifest is a UTF-8 JSON document (see `docs/FORMATS.md`).
//! Raw class names in mask entries are mapped through the merge table on
//! load, so everything downstream only ever sees merged class names.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use super::mask::{BitMask, SegmentMask};
use super::DatasetError;

/// Manifest as it appears on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub dataset_id: String,
    pub part_classes: Vec<String>,
    #[serde(default)]
    pub merge_table: BTreeMap<String, String>,
    #[serde(default)]
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub pixel_source: PathBuf,
    /// Raw class name → mask sidecar path, relative to the manifest.
    #[serde(default)]
    pub masks: BTreeMap<String, PathBuf>,
    /// Raw class name → vertex count of the annotated polygon, when known.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub polygon_vertices: BTreeMap<String, usize>,
}

/// A validated image entry with merged class names and resolved paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub pixel_source: PathBuf,
    /// Merged class → every sidecar contributing to it.
    pub masks: BTreeMap<String, Vec<PathBuf>>,
    pub polygon_vertices: BTreeMap<String, usize>,
}

/// Class merge table with chains resolved, so applying it is idempotent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    resolved: BTreeMap<String, String>,
}

impl MergeTable {
    pub fn new(raw: &BTreeMap<String, String>) -> Result<Self, DatasetError> {
        let mut resolved = BTreeMap::new();
        for start in raw.keys() {
            let mut seen = HashSet::new();
            let mut current = start.as_str();
            while let Some(next) = raw.get(current) {
                if next == current {
                    break;
                }
                if !seen.insert(current) {
                    return Err(DatasetError::Manifest(format!(
                        "merge table contains a cycle through '{start}'"
                    )));
                }
                current = next;
            }
            resolved.insert(start.clone(), current.to_string());
        }
        Ok(Self { resolved })
    }

    pub fn apply<'a>(&'a self, class: &'a str) -> &'a str {
        self.resolved.get(class).map(String::as_str).unwrap_or(class)
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub dataset_id: String,
    pub part_classes: Vec<String>,
    pub merge: MergeTable,
    pub images: Vec<ImageEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let file: ManifestFile =
            serde_json::from_str(&text).map_err(|e| DatasetError::json(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_file(file, &base)
    }

    pub fn from_file(file: ManifestFile, base_dir: &Path) -> Result<Self, DatasetError> {
        let merge = MergeTable::new(&file.merge_table)?;

        let mut part_classes: Vec<String> = Vec::new();
        for raw in &file.part_classes {
            let merged = merge.apply(raw).to_string();
            if !part_classes.contains(&merged) {
                part_classes.push(merged);
            }
        }

        let mut ids = HashSet::new();
        let mut images = Vec::with_capacity(file.images.len());
        for img in file.images {
            if !ids.insert(img.id.clone()) {
                return Err(DatasetError::Manifest(format!("duplicate image id '{}'", img.id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(DatasetError::Manifest(format!(
                    "image '{}' has zero width or height",
                    img.id
                )));
            }
            let mut masks: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
            for (raw, rel) in &img.masks {
                let merged = merge.apply(raw);
                if !part_classes.iter().any(|c| c == merged) {
                    return Err(DatasetError::Manifest(format!(
                        "image '{}' has a mask for class '{raw}' which is not a part class after merging",
                        img.id
                    )));
                }
                masks.entry(merged.to_string()).or_default().push(base_dir.join(rel));
            }
            let mut polygon_vertices = BTreeMap::new();
            for (raw, n) in &img.polygon_vertices {
                *polygon_vertices.entry(merge.apply(raw).to_string()).or_insert(0) += n;
            }
            images.push(ImageEntry {
                id: img.id,
                width: img.width,
                height: img.height,
                pixel_source: base_dir.join(img.pixel_source),
                masks,
                polygon_vertices,
            });
        }

        Ok(Self {
            dataset_id: file.dataset_id,
            part_classes,
            merge,
            images,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|img| img.id == id)
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.part_classes.iter().any(|c| c == class)
    }

    /// Ground truth for one (image, merged class): the union of every
    /// contributing sidecar, or an empty mask when the part is absent.
    pub fn load_mask(&self, image: &ImageEntry, class: &str) -> Result<BitMask, DatasetError> {
        let mut out = BitMask::new(image.width, image.height);
        for path in image.masks.get(class).into_iter().flatten() {
            let seg = SegmentMask::read_json(path)?;
            if (seg.width, seg.height) != (image.width, image.height) {
                return Err(DatasetError::DimensionMismatch {
                    expected: (image.width, image.height),
                    found: (seg.width, seg.height),
                });
            }
            out.union_with(&seg.decode()?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(classes: &[&str], merge: &[(&str, &str)]) -> ManifestFile {
        ManifestFile {
            dataset_id: "cars".into(),
            part_classes: classes.iter().map(|s| s.to_string()).collect(),
            merge_table: merge.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            images: vec![],
        }
    }

    fn image(id: &str, masks: &[&str]) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            width: 8,
            height: 8,
            pixel_source: format!("{id}.png").into(),
            masks: masks.iter().map(|c| (c.to_string(), format!("{id}_{c}.json").into())).collect(),
            polygon_vertices: BTreeMap::new(),
        }
    }

    #[test]
    fn mirror_sides_merge_into_one_class() {
        let f = file(
            &["left mirror", "right mirror", "wheel"],
            &[("left mirror", "mirror"), ("right mirror", "mirror")],
        );
        let m = Manifest::from_file(f, Path::new("")).unwrap();
        assert_eq!(m.part_classes, vec!["mirror", "wheel"]);
    }

    #[test]
    fn empty_image_list_is_valid() {
        let m = Manifest::from_file(file(&["wheel"], &[]), Path::new("")).unwrap();
        assert!(m.images.is_empty());
    }

    #[test]
    fn mask_for_unknown_class_is_rejected() {
        let mut f = file(&["wheel"], &[]);
        f.images.push(image("a", &["door"]));
        assert!(matches!(
            Manifest::from_file(f, Path::new("")),
            Err(DatasetError::Manifest(_))
        ));
    }

    #[test]
    fn merged_masks_are_grouped() {
        let mut f = file(
            &["left mirror", "right mirror"],
            &[("left mirror", "mirror"), ("right mirror", "mirror")],
        );
        f.images.push(image("a", &["left mirror", "right mirror"]));
        let m = Manifest::from_file(f, Path::new("base")).unwrap();
        assert_eq!(m.images[0].masks["mirror"].len(), 2);
        assert_eq!(m.images[0].pixel_source, Path::new("base/a.png"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut f = file(&["wheel"], &[]);
        f.images.push(image("a", &[]));
        f.images.push(image("a", &[]));
        assert!(Manifest::from_file(f, Path::new("")).is_err());
    }

    #[test]
    fn merge_is_idempotent_even_with_chains() {
        let raw: BTreeMap<String, String> = [("a", "b"), ("b", "c"), ("x", "y")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let t = MergeTable::new(&raw).unwrap();
        for class in ["a", "b", "c", "x", "y", "z"] {
            let once = t.apply(class).to_string();
            assert_eq!(t.apply(&once), once);
        }
        assert_eq!(t.apply("a"), "c");
    }

    #[test]
    fn merge_cycle_is_an_error() {
        let raw: BTreeMap<String, String> =
            [("a", "b"), ("b", "a")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        assert!(MergeTable::new(&raw).is_err());
    }

    #[test]
    fn missing_manifest_file() {
        assert!(matches!(
            Manifest::load(Path::new("/nonexistent/manifest.json")),
            Err(DatasetError::Io { .. })
        ));
    }
}
