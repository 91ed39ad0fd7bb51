//! Imported visual-textual similarity scores per (patch, part class).
//!
//! CSV with header `image_id,patch_index,part_class,score`.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::features::PatchKey;
use super::DatasetError;
use crate::patchgrid::PatchGrid;

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    image_id: String,
    patch_index: u32,
    part_class: String,
    score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityScores {
    by_class: BTreeMap<String, HashMap<PatchKey, f64>>,
}

impl SimilarityScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: PatchKey, class: &str, score: f64) -> Result<(), DatasetError> {
        if !(-1.0..=1.0).contains(&score) {
            return Err(DatasetError::Scores(format!(
                "score {score} for {}#{} / {class} outside [-1, 1]",
                key.image_id, key.index
            )));
        }
        self.by_class.entry(class.to_string()).or_default().insert(key, score);
        Ok(())
    }

    pub fn get(&self, class: &str, key: &PatchKey) -> Option<f64> {
        self.by_class.get(class)?.get(key).copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.by_class.keys().map(String::as_str)
    }

    pub fn for_class(&self, class: &str) -> Option<&HashMap<PatchKey, f64>> {
        self.by_class.get(class)
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every scored patch must exist in one of the grids.
    pub fn check_against(&self, grids: &[PatchGrid]) -> Result<(), DatasetError> {
        let sizes: HashMap<&str, usize> =
            grids.iter().map(|g| (g.image_id.as_str(), g.patches.len())).collect();
        for (class, scores) in &self.by_class {
            for key in scores.keys() {
                let known = sizes.get(key.image_id.as_str()).is_some_and(|&n| (key.index as usize) < n);
                if !known {
                    return Err(DatasetError::Scores(format!(
                        "score for {}#{} / {class} refers to a patch that is not in the grid",
                        key.image_id, key.index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, DatasetError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| DatasetError::Scores(format!("{}: {e}", path.display())))?;
        let mut out = Self::new();
        for row in reader.deserialize() {
            let row: ScoreRow = row.map_err(|e| DatasetError::Scores(format!("{}: {e}", path.display())))?;
            out.insert(PatchKey::new(row.image_id, row.patch_index), &row.part_class, row.score)?;
        }
        Ok(out)
    }

    /// Writes rows sorted by (image, patch, class) so output is reproducible.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut rows: Vec<(&PatchKey, &str, f64)> = self
            .by_class
            .iter()
            .flat_map(|(c, m)| m.iter().map(move |(k, s)| (k, c.as_str(), *s)))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(b.1)));
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| DatasetError::Scores(format!("{}: {e}", path.display())))?;
        for (k, c, s) in rows {
            w.serialize(ScoreRow {
                image_id: k.image_id.clone(),
                patch_index: k.index,
                part_class: c.to_string(),
                score: s,
            })
            .map_err(|e| DatasetError::Scores(e.to_string()))?;
        }
        w.flush().map_err(|e| DatasetError::io(path, e))
    }
}
