//! Prototypical patches: clustering, per-part ranking, click-based
//! annotation and the efficiency measurements built on top of them.

mod annotation;
mod kmeans;
mod retrieval;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::{FeatureBlob, PatchKey, SimilarityScores};

pub use annotation::{
    annotation_cost_comparison, approximate_polygon_vertices, records_to_labels, simulate_annotation,
    AnnotationRecord, AnnotationSource, CostRow, CostTable, LabelStore,
};
pub use kmeans::KMeansConfig;
pub use retrieval::{prototype_patch_order, rank_patches_by_score, retrieval_efficacy};

pub const DEFAULT_K: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub id: u32,
    pub centroid: Vec<f64>,
    pub members: Vec<PatchKey>,
    #[serde(default)]
    pub score_per_class: BTreeMap<String, f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PrototypeError {
    #[error("k = {k} must be between 1 and the number of patches ({patches})")]
    BadK { k: usize, patches: usize },
    #[error("no score for part class '{class}' on prototype {prototype}")]
    MissingScores { class: String, prototype: u32 },
    #[error("no ground-truth label for patch {index} of image '{image_id}'")]
    MissingLabel { image_id: String, index: u32 },
    #[error("k = {k} exceeds the {universe} ranked patches")]
    KExceedsUniverse { k: usize, universe: usize },
    #[error("the two rankings do not cover the same patches")]
    UniverseMismatch,
    #[error("part class '{0}' has no images")]
    NoImages(String),
    #[error("invalid annotation record: {0}")]
    InvalidRecord(String),
    #[error("{path}: {message}")]
    Store { path: String, message: String },
}

/// Clusters every row of `features` into `k` prototypes.
///
/// Rows are L2-normalized first; centroids are normalized means. The
/// result is a deterministic function of `(features, k, seed, config)`.
pub fn cluster_prototypes(
    features: &FeatureBlob,
    k: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<Vec<Prototype>, PrototypeError> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(PrototypeError::BadK { k, patches: n });
    }
    let points: Vec<Vec<f64>> = (0..n).map(|i| kmeans::normalize(features.row_at(i))).collect();
    let clustering = kmeans::spherical_kmeans(&points, k, seed, config);

    let mut protos: Vec<Prototype> = clustering
        .centroids
        .into_iter()
        .enumerate()
        .map(|(id, centroid)| Prototype {
            id: id as u32,
            centroid,
            members: Vec::new(),
            score_per_class: BTreeMap::new(),
        })
        .collect();
    for (row, &cluster) in clustering.assignment.iter().enumerate() {
        protos[cluster].members.push(features.keys()[row].clone());
    }
    Ok(protos)
}

/// Sets each prototype's per-class score to the mean of its members'
/// similarity scores. A class is only recorded when every member has a score.
pub fn attach_scores(prototypes: &mut [Prototype], scores: &SimilarityScores) {
    for proto in prototypes.iter_mut() {
        proto.score_per_class.clear();
        for class in scores.classes() {
            let vals: Option<Vec<f64>> = proto.members.iter().map(|m| scores.get(class, m)).collect();
            if let Some(vals) = vals.filter(|v| !v.is_empty()) {
                proto.score_per_class.insert(class.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
}

/// Orders prototypes by descending score for `part_class`, ties by id.
pub fn rank_prototypes<'a>(
    prototypes: &'a [Prototype],
    part_class: &str,
) -> Result<Vec<&'a Prototype>, PrototypeError> {
    let mut scored = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        let s = p.score_per_class.get(part_class).copied().ok_or_else(|| PrototypeError::MissingScores {
            class: part_class.to_string(),
            prototype: p.id,
        })?;
        scored.push((s, p));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    Ok(scored.into_iter().map(|(_, p)| p).collect())
}

pub fn read_prototypes(path: &Path) -> Result<Vec<Prototype>, PrototypeError> {
    let store_err = |message: String| PrototypeError::Store { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| store_err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| store_err(e.to_string()))
}

pub fn write_prototypes(path: &Path, prototypes: &[Prototype]) -> Result<(), PrototypeError> {
    let store_err = |message: String| PrototypeError::Store { path: path.display().to_string(), message };
    let text = serde_json::to_string_pretty(prototypes).map_err(|e| store_err(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| store_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn blob(rows: &[Vec<f32>]) -> FeatureBlob {
        let mut b = FeatureBlob::new(rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            b.push(PatchKey::new("img", i as u32), r).unwrap();
        }
        b
    }

    fn proto(id: u32, score: f64) -> Prototype {
        Prototype {
            id,
            centroid: vec![],
            members: vec![PatchKey::new("a", id)],
            score_per_class: [("wheel".to_string(), score)].into_iter().collect(),
        }
    }

    #[test]
    fn single_cluster_has_everything_and_normalized_mean() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]];
        let protos = cluster_prototypes(&blob(&rows), 1, 7, &KMeansConfig::default()).unwrap();
        assert_eq!(protos.len(), 1);
        assert_eq!(protos[0].members.len(), 3);
        let h = 0.5f64.sqrt();
        let mean = [(1.0 + 0.0 + h) / 3.0, (0.0 + 1.0 + h) / 3.0];
        let norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!((protos[0].centroid[0] - mean[0] / norm).abs() < 1e-12);
        assert!((protos[0].centroid[1] - mean[1] / norm).abs() < 1e-12);
    }

    #[test]
    fn k_equal_to_patch_count_gives_singletons() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| {
            let a = i as f32 * 0.9;
            vec![a.cos(), a.sin()]
        }).collect();
        let protos = cluster_prototypes(&blob(&rows), 6, 3, &KMeansConfig::default()).unwrap();
        assert!(protos.iter().all(|p| p.members.len() == 1));
    }

    #[test]
    fn bad_k_rejected() {
        let rows = vec![vec![1.0, 0.0]];
        assert!(cluster_prototypes(&blob(&rows), 2, 0, &KMeansConfig::default()).is_err());
        assert!(cluster_prototypes(&blob(&rows), 0, 0, &KMeansConfig::default()).is_err());
    }

    /// Oracle: the best 2-partition by within-cluster squared distance,
    /// found by enumerating all 2^(n-1) splits.
    fn best_two_partition(points: &[Vec<f64>]) -> Vec<bool> {
        let n = points.len();
        let cost = |members: &[&Vec<f64>]| -> f64 {
            if members.is_empty() {
                return 0.0;
            }
            let d = members[0].len();
            let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect();
            members.iter().map(|m| kmeans::sq_dist(m, &mean)).sum()
        };
        let mut best = (f64::INFINITY, vec![]);
        for mask in 0u32..(1 << (n - 1)) {
            let side: Vec<bool> = (0..n).map(|i| i < n - 1 && mask & (1 << i) != 0).collect();
            let a: Vec<&Vec<f64>> = points.iter().zip(&side).filter(|(_, s)| **s).map(|(p, _)| p).collect();
            let b: Vec<&Vec<f64>> = points.iter().zip(&side).filter(|(_, s)| !**s).map(|(p, _)| p).collect();
            let c = cost(&a) + cost(&b);
            if c < best.0 {
                best = (c, side);
            }
        }
        best.1
    }

    #[test]
    fn separated_blobs_match_exhaustive_partition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.05).unwrap();
        for trial in 0..5 {
            let mut rows = Vec::new();
            for i in 0..12 {
                let (cx, cy) = if i % 2 == 0 { (1.0, 0.2) } else { (0.2, 1.0) };
                rows.push(vec![cx + noise.sample(&mut rng) as f32, cy + noise.sample(&mut rng) as f32]);
            }
            let b = blob(&rows);
            let protos = cluster_prototypes(&b, 2, trial, &KMeansConfig::default()).unwrap();
            let points: Vec<Vec<f64>> = rows.iter().map(|r| kmeans::normalize(r)).collect();
            let oracle = best_two_partition(&points);
            let ours: Vec<bool> = (0..12)
                .map(|i| protos[0].members.iter().any(|m| m.index == i as u32))
                .collect();
            let same = ours == oracle || ours.iter().zip(&oracle).all(|(a, b)| a != b);
            assert!(same, "trial {trial}: {ours:?} vs {oracle:?}");
        }
    }

    #[test]
    fn assignment_is_nearest_and_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f32>> = (0..200).map(|_| (0..5).map(|_| rng.random::<f32>() - 0.3).collect()).collect();
        let b = blob(&rows);
        let protos = cluster_prototypes(&b, 17, 42, &KMeansConfig::default()).unwrap();
        assert_eq!(protos, cluster_prototypes(&b, 17, 42, &KMeansConfig::default()).unwrap());
        let mut seen = 0;
        for p in &protos {
            assert!(!p.members.is_empty());
            for m in &p.members {
                seen += 1;
                let x = kmeans::normalize(&rows[m.index as usize]);
                let own = kmeans::sq_dist(&x, &p.centroid);
                for q in &protos {
                    assert!(own <= kmeans::sq_dist(&x, &q.centroid) + 1e-12);
                }
            }
        }
        assert_eq!(seen, 200);
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let protos = vec![proto(0, 0.9), proto(1, 0.2), proto(2, 0.9)];
        let ids: Vec<u32> = rank_prototypes(&protos, "wheel").unwrap().iter().map(|p| p.id).collect();
        assert_eq!(ids, vec![0, 2, 1]);
        let single = vec![proto(4, 0.1)];
        assert_eq!(rank_prototypes(&single, "wheel").unwrap()[0].id, 4);
        assert!(matches!(rank_prototypes(&protos, "door"), Err(PrototypeError::MissingScores { .. })));
    }

    #[test]
    fn ranking_matches_sort_oracle_and_equal_scores_are_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let protos: Vec<Prototype> = (0..20).map(|i| proto(i, (rng.random_range(0..5) as f64) / 4.0)).collect();
        let ranked: Vec<u32> = rank_prototypes(&protos, "wheel").unwrap().iter().map(|p| p.id).collect();
        // Oracle: insertion sort on the pair (-score, id).
        let mut oracle: Vec<(f64, u32)> = Vec::new();
        for p in &protos {
            let item = (-p.score_per_class["wheel"], p.id);
            let pos = oracle.iter().position(|o| o.0 > item.0 || (o.0 == item.0 && o.1 > item.1)).unwrap_or(oracle.len());
            oracle.insert(pos, item);
        }
        assert_eq!(ranked, oracle.iter().map(|o| o.1).collect::<Vec<_>>());

        let flat: Vec<Prototype> = (0..7).rev().map(|i| proto(i, 0.3)).collect();
        let ids: Vec<u32> = rank_prototypes(&flat, "wheel").unwrap().iter().map(|p| p.id).collect();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn prototype_score_is_member_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f32>> = (0..40).map(|_| (0..3).map(|_| rng.random::<f32>()).collect()).collect();
        let b = blob(&rows);
        let mut scores = SimilarityScores::new();
        for k in b.keys() {
            scores.insert(k.clone(), "wheel", rng.random_range(-1.0..1.0)).unwrap();
        }
        let mut protos = cluster_prototypes(&b, 6, 1, &KMeansConfig::default()).unwrap();
        attach_scores(&mut protos, &scores);
        for p in &protos {
            let mean = p.members.iter().map(|m| scores.get("wheel", m).unwrap()).sum::<f64>() / p.members.len() as f64;
            assert!((p.score_per_class["wheel"] - mean).abs() < 1e-9);
        }
    }
}
