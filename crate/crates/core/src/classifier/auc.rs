use super::ClassifierError;

/// Area under the ROC curve via the Mann–Whitney rank statistic; tied
/// scores earn half credit.
///
/// Ranks are accumulated doubled, as integers, so the result equals pairwise
/// enumeration exactly.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64, ClassifierError> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(ClassifierError::NonFinite);
    }
    let n_pos = scores.iter().filter(|(_, l)| *l).count() as u64;
    let n_neg = scores.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ClassifierError::SingleClass);
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of doubled average ranks (1-based) of the positives.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share the doubled average rank (i + 1 + j).
        let pos_in_group = sorted[i..j].iter().filter(|(_, l)| *l).count() as u64;
        twice_rank_sum += pos_in_group * (i as u64 + 1 + j as u64);
        i = j;
    }
    // 2·U = 2·R₊ − n₊(n₊ + 1)
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(auc(&s).unwrap(), 1.0);
    }

    #[test]
    fn three_of_four_pairs() {
        let s = [(0.9, true), (0.8, true), (0.85, false), (0.1, false)];
        assert_eq!(auc(&s).unwrap(), 0.75);
    }

    #[test]
    fn all_tied_is_half() {
        let s = [(0.4, true), (0.4, false), (0.4, false), (0.4, true), (0.4, true)];
        assert_eq!(auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(auc(&[(0.1, true), (0.2, true)]), Err(ClassifierError::SingleClass)));
    }

    #[test]
    fn invariant_under_monotone_transform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s: Vec<(f64, bool)> =
                (0..30).map(|_| ((rng.random_range(0..10) as f64) / 10.0, rng.random_bool(0.4))).collect();
            if s.iter().all(|x| x.1) || s.iter().all(|x| !x.1) {
                continue;
            }
            let t: Vec<(f64, bool)> = s.iter().map(|&(v, l)| ((3.0 * v).exp() - 7.0, l)).collect();
            assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
        }
    }
}
