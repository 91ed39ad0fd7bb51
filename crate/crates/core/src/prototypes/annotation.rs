//! Prototype-level annotation: the click model, the append-only label store
//! and the click-cost comparison against polygon annotation.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use super::{Prototype, PrototypeError};
use crate::dataset::{BitMask, PatchKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Simulated,
    Human,
}

/// One verified prototype: a bulk label for all members plus the members
/// whose label is the opposite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub prototype_id: u32,
    pub part_class: String,
    pub bulk_label: bool,
    /// Indices into the prototype's member list.
    pub exceptions: Vec<u32>,
    pub clicks: u32,
    pub source: AnnotationSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl AnnotationRecord {
    pub fn new(prototype_id: u32, part_class: &str, bulk_label: bool, mut exceptions: Vec<u32>, source: AnnotationSource) -> Self {
        exceptions.sort_unstable();
        exceptions.dedup();
        Self {
            prototype_id,
            part_class: part_class.to_string(),
            bulk_label,
            clicks: 1 + exceptions.len() as u32,
            exceptions,
            source,
            annotator: None,
            timestamp: None,
        }
    }

    pub fn validate(&self, prototype: &Prototype) -> Result<(), PrototypeError> {
        if prototype.id != self.prototype_id {
            return Err(PrototypeError::InvalidRecord(format!(
                "record for prototype {} checked against prototype {}",
                self.prototype_id, prototype.id
            )));
        }
        if self.clicks as usize != 1 + self.exceptions.len() {
            return Err(PrototypeError::InvalidRecord(format!(
                "clicks = {} but there are {} exceptions",
                self.clicks,
                self.exceptions.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &e in &self.exceptions {
            if e as usize >= prototype.members.len() || !seen.insert(e) {
                return Err(PrototypeError::InvalidRecord(format!(
                    "exception {e} is not a distinct member of prototype {} ({} members)",
                    prototype.id,
                    prototype.members.len()
                )));
            }
        }
        Ok(())
    }

    /// Expands the record into one label per prototype member.
    pub fn member_labels<'a>(&'a self, prototype: &'a Prototype) -> impl Iterator<Item = (&'a PatchKey, bool)> + 'a {
        prototype.members.iter().enumerate().map(move |(i, key)| {
            let flipped = self.exceptions.binary_search(&(i as u32)).is_ok();
            (key, self.bulk_label != flipped)
        })
    }
}

/// Annotates a prototype the way a careful annotator would: one click for
/// the majority label, one more per minority member.
///
/// Equal counts take the positive label as bulk.
pub fn simulate_annotation(
    prototype: &Prototype,
    ground_truth: &HashMap<PatchKey, bool>,
    part_class: &str,
) -> Result<AnnotationRecord, PrototypeError> {
    let mut labels = Vec::with_capacity(prototype.members.len());
    for m in &prototype.members {
        let l = ground_truth.get(m).copied().ok_or_else(|| PrototypeError::MissingLabel {
            image_id: m.image_id.clone(),
            index: m.index,
        })?;
        labels.push(l);
    }
    let positives = labels.iter().filter(|l| **l).count();
    let bulk = positives * 2 >= labels.len();
    let exceptions = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != bulk)
        .map(|(i, _)| i as u32)
        .collect();
    Ok(AnnotationRecord::new(prototype.id, part_class, bulk, exceptions, AnnotationSource::Simulated))
}

/// Patch labels for `part_class` implied by the latest record per prototype.
pub fn records_to_labels(
    records: &[AnnotationRecord],
    prototypes: &[Prototype],
    part_class: &str,
) -> Result<Vec<(PatchKey, bool)>, PrototypeError> {
    let by_id: HashMap<u32, &Prototype> = prototypes.iter().map(|p| (p.id, p)).collect();
    let mut latest: BTreeMap<u32, &AnnotationRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.part_class == part_class) {
        latest.insert(r.prototype_id, r);
    }
    let mut labels = BTreeMap::new();
    for (id, record) in latest {
        let proto = by_id
            .get(&id)
            .ok_or_else(|| PrototypeError::InvalidRecord(format!("unknown prototype {id}")))?;
        record.validate(proto)?;
        for (key, label) in record.member_labels(proto) {
            labels.insert(key.clone(), label);
        }
    }
    Ok(labels.into_iter().collect())
}

/// Append-only JSON-lines store of annotation records.
///
/// Each record is written with a single `write_all` of one complete line,
/// so a crash can at worst leave a truncated final line, which `load`
/// skips. Later records for the same (prototype, part) supersede earlier
/// ones.
#[derive(Debug, Clone)]
pub struct LabelStore {
    path: PathBuf,
}

impl LabelStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn err(&self, message: impl ToString) -> PrototypeError {
        PrototypeError::Store { path: self.path.display().to_string(), message: message.to_string() }
    }

    pub fn append(&self, record: &AnnotationRecord) -> Result<(), PrototypeError> {
        let mut line = serde_json::to_string(record).map_err(|e| self.err(e))?;
        line.push('\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| self.err(e))?;
        f.write_all(line.as_bytes()).map_err(|e| self.err(e))?;
        f.sync_data().map_err(|e| self.err(e))
    }

    /// Every record in file order. A missing file is an empty store.
    pub fn load(&self) -> Result<Vec<AnnotationRecord>, PrototypeError> {
        let f = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(self.err(e)),
        };
        let lines: Vec<String> = std::io::BufReader::new(f)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| self.err(e))?;
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(r) => out.push(r),
                Err(_) if i + 1 == lines.len() => {
                    log::warn!("{}: ignoring truncated final line", self.path.display());
                }
                Err(e) => return Err(self.err(format!("line {}: {e}", i + 1))),
            }
        }
        Ok(out)
    }

    /// Last record per (prototype, part class).
    pub fn latest(&self) -> Result<BTreeMap<(u32, String), AnnotationRecord>, PrototypeError> {
        let mut map = BTreeMap::new();
        for r in self.load()? {
            map.insert((r.prototype_id, r.part_class.clone()), r);
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub part_class: String,
    pub images: usize,
    pub patch_clicks_per_image: f64,
    pub polygon_clicks_per_image: f64,
    /// Polygon clicks divided by patch clicks.
    pub ratio: f64,
    pub polygon_approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("part_class,images,patch_clicks_per_image,polygon_clicks_per_image,ratio,polygon_approximate\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{}\n",
                r.part_class, r.images, r.patch_clicks_per_image, r.polygon_clicks_per_image, r.ratio, r.polygon_approximate
            ));
        }
        s
    }
}

/// Clicks per image for prototype annotation vs. polygon drawing.
///
/// `polygon_vertices` maps each class to one vertex count per annotated
/// image, paired with whether those counts are approximations.
pub fn annotation_cost_comparison(
    records: &[AnnotationRecord],
    polygon_vertices: &BTreeMap<String, (Vec<usize>, bool)>,
) -> Result<CostTable, PrototypeError> {
    let mut rows = Vec::new();
    for (class, (vertices, approximate)) in polygon_vertices {
        if vertices.is_empty() {
            return Err(PrototypeError::NoImages(class.clone()));
        }
        let images = vertices.len();
        let patch_clicks: u64 = records.iter().filter(|r| &r.part_class == class).map(|r| r.clicks as u64).sum();
        let patch = patch_clicks as f64 / images as f64;
        let polygon = vertices.iter().sum::<usize>() as f64 / images as f64;
        rows.push(CostRow {
            part_class: class.clone(),
            images,
            patch_clicks_per_image: patch,
            polygon_clicks_per_image: polygon,
            ratio: if patch > 0.0 { polygon / patch } else { f64::INFINITY },
            polygon_approximate: *approximate,
        });
    }
    Ok(CostTable { rows })
}

/// Corner count of the pixel outline of `mask` (outer boundaries and holes).
///
/// Stands in for a polygon vertex count when only a raster mask exists. A
/// lattice point is a corner when 1 or 3 of its 4 surrounding pixels are
/// set, and a double corner when exactly 2 diagonal ones are.
pub fn approximate_polygon_vertices(mask: &BitMask) -> usize {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let at = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as u32, y as u32);
    let mut corners = 0;
    for y in 0..=h {
        for x in 0..=w {
            let q = [at(x - 1, y - 1), at(x, y - 1), at(x - 1, y), at(x, y)];
            match q.iter().filter(|b| **b).count() {
                1 | 3 => corners += 1,
                2 if q[0] == q[3] => corners += 2,
                _ => {}
            }
        }
    }
    corners
}
