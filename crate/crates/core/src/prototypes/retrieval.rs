use std::collections::{HashMap, HashSet};

use super::{Prototype, PrototypeError};
use crate::dataset::PatchKey;

/// Patches ordered by their own score, descending; ties by key.
pub fn rank_patches_by_score(scores: &HashMap<PatchKey, f64>) -> Vec<PatchKey> {
    let mut keys: Vec<(&PatchKey, f64)> = scores.iter().map(|(k, s)| (k, *s)).collect();
    keys.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    keys.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Members of already-ranked prototypes, flattened in rank order.
pub fn prototype_patch_order(ranked: &[&Prototype]) -> Vec<PatchKey> {
    ranked.iter().flat_map(|p| p.members.iter().cloned()).collect()
}

/// Precision@k of a raw patch-score ranking and of a prototype ranking over
/// the same patches, returned as `(raw, prototype)`.
pub fn retrieval_efficacy(
    raw_ranking: &[PatchKey],
    prototype_ranking: &[PatchKey],
    positives: &HashSet<PatchKey>,
    k: usize,
) -> Result<(f64, f64), PrototypeError> {
    let raw_set: HashSet<&PatchKey> = raw_ranking.iter().collect();
    let proto_set: HashSet<&PatchKey> = prototype_ranking.iter().collect();
    if raw_set.len() != raw_ranking.len() || raw_set != proto_set || prototype_ranking.len() != raw_ranking.len() {
        return Err(PrototypeError::UniverseMismatch);
    }
    if k == 0 || k > raw_ranking.len() {
        return Err(PrototypeError::KExceedsUniverse { k, universe: raw_ranking.len() });
    }
    let precision = |ranking: &[PatchKey]| {
        ranking[..k].iter().filter(|p| positives.contains(*p)).count() as f64 / k as f64
    };
    Ok((precision(raw_ranking), precision(prototype_ranking)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::rank_prototypes;
    use std::collections::BTreeMap;

    fn key(i: u32) -> PatchKey {
        PatchKey::new("img", i)
    }

    fn proto(id: u32, members: &[u32], scores: &HashMap<PatchKey, f64>) -> Prototype {
        let m: Vec<PatchKey> = members.iter().map(|&i| key(i)).collect();
        let mean = m.iter().map(|k| scores[k]).sum::<f64>() / m.len() as f64;
        Prototype {
            id,
            centroid: vec![],
            members: m,
            score_per_class: BTreeMap::from([("wheel".to_string(), mean)]),
        }
    }

    #[test]
    fn noisy_positive_is_rescued_by_its_prototype() {
        // Patches 0..4 are positive; patch 3 has a poor score of its own.
        let raw = [0.9, 0.8, 0.7, 0.1, 0.6, 0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.12];
        let scores: HashMap<PatchKey, f64> = raw.iter().enumerate().map(|(i, s)| (key(i as u32), *s)).collect();
        let positives: HashSet<PatchKey> = (0..4).map(key).collect();
        let protos = vec![
            proto(0, &[0, 1, 2, 3], &scores),
            proto(1, &[4, 5, 6, 7], &scores),
            proto(2, &[8, 9, 10, 11], &scores),
        ];
        let ranked = rank_prototypes(&protos, "wheel").unwrap();
        let (p_raw, p_proto) = retrieval_efficacy(
            &rank_patches_by_score(&scores),
            &prototype_patch_order(&ranked),
            &positives,
            4,
        )
        .unwrap();
        // By hand: raw top-4 = {0, 1, 2, 4} -> 3/4; prototype top-4 = {0, 1, 2, 3} -> 4/4.
        assert_eq!(p_raw, 0.75);
        assert_eq!(p_proto, 1.0);
        assert!(p_proto > p_raw);
    }

    #[test]
    fn all_positive_and_full_universe() {
        let keys: Vec<PatchKey> = (0..6).map(key).collect();
        let mut rev = keys.clone();
        rev.reverse();
        let all: HashSet<PatchKey> = keys.iter().cloned().collect();
        for k in 1..=6 {
            assert_eq!(retrieval_efficacy(&keys, &rev, &all, k).unwrap(), (1.0, 1.0));
        }
        let some: HashSet<PatchKey> = [key(1), key(4)].into_iter().collect();
        assert_eq!(retrieval_efficacy(&keys, &rev, &some, 6).unwrap(), (2.0 / 6.0, 2.0 / 6.0));
        assert!(retrieval_efficacy(&keys, &rev, &some, 7).is_err());
        assert!(retrieval_efficacy(&keys, &rev[..5], &some, 2).is_err());
    }
}
