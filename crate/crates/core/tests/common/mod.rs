//! Independent reference implementations shared by the integration tests.
//! None of them call into the code they check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use partguide::dataset::BitMask;
use partguide::evaluation::{IouCounts, SelectionData};
use partguide::PixelBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Minimum of `½ αᵀQα − eᵀα` subject to `yᵀα = 0`, `0 ≤ α ≤ c`, by
/// enumerating which coordinates sit at 0, at `c` or strictly inside, and
/// solving the equality-constrained stationarity system on each face.
pub fn qp_minimum(q: &DMatrix<f64>, y: &[f64], c: &[f64]) -> f64 {
    let n = y.len();
    let objective = |a: &[f64]| {
        let v = DVector::from_column_slice(a);
        0.5 * (v.transpose() * q * &v)[(0, 0)] - v.sum()
    };
    let mut best = f64::INFINITY;
    let mut state = vec![0u8; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha: Vec<f64> = (0..n).map(|i| if state[i] == 1 { c[i] } else { 0.0 }).collect();
        let fixed_balance: f64 = (0..n).filter(|&i| state[i] != 2).map(|i| y[i] * alpha[i]).sum();
        let feasible = if free.is_empty() {
            fixed_balance.abs() < 1e-9
        } else {
            let m = free.len();
            let mut a = DMatrix::zeros(m + 1, m + 1);
            let mut b = DVector::zeros(m + 1);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = q[(i, j)];
                }
                a[(r, m)] = y[i];
                a[(m, r)] = y[i];
                let fixed_grad: f64 = (0..n).filter(|&j| state[j] != 2).map(|j| q[(i, j)] * alpha[j]).sum();
                b[r] = 1.0 - fixed_grad;
            }
            b[m] = -fixed_balance;
            match a.lu().solve(&b) {
                Some(x) if x.iter().all(|v| v.is_finite()) => {
                    for (r, &i) in free.iter().enumerate() {
                        alpha[i] = x[r];
                    }
                    free.iter().all(|&i| alpha[i] > -1e-9 && alpha[i] < c[i] + 1e-9)
                }
                _ => false,
            }
        };
        if feasible {
            best = best.min(objective(&alpha));
        }
        let mut k = 0;
        while k < n {
            state[k] += 1;
            if state[k] < 3 {
                break;
            }
            state[k] = 0;
            k += 1;
        }
        if k == n {
            return best;
        }
    }
}

/// Boxes overlap when their intersection has positive area.
pub fn boxes_overlap(a: &PixelBox, b: &PixelBox) -> bool {
    a.x0.max(b.x0) < a.x1.min(b.x1) && a.y0.max(b.y0) < a.y1.min(b.y1)
}

/// Connected groups of the overlap graph via transitive closure, each as
/// sorted positions into `boxes`, sorted by first element.
pub fn closure_groups(boxes: &[PixelBox]) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = i == j || boxes_overlap(&boxes[i], &boxes[j]);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut seen = vec![false; n];
    let mut groups = Vec::new();
    for i in 0..n {
        if seen[i] {
            continue;
        }
        let g: Vec<usize> = (0..n).filter(|&j| reach[i][j]).collect();
        for &j in &g {
            seen[j] = true;
        }
        groups.push(g);
    }
    groups
}

pub fn random_box(rng: &mut impl Rng, extent: u32) -> PixelBox {
    let x0 = rng.random_range(0..extent - 1);
    let y0 = rng.random_range(0..extent - 1);
    let x1 = rng.random_range(x0 + 1..=extent);
    let y1 = rng.random_range(y0 + 1..=extent);
    PixelBox::new(x0, y0, x1, y1)
}

/// AUC by comparing every positive with every negative.
pub fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (sp, _) in scores.iter().filter(|s| s.1) {
        for (sn, _) in scores.iter().filter(|s| !s.1) {
            pairs += 1;
            twice += if sp > sn { 2 } else if sp == sn { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// IoU by visiting every pixel; two empty masks score 1.
pub fn pixel_loop_iou(a: &BitMask, b: &BitMask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_mask(rng: &mut impl Rng, w: u32, h: u32, density: f64) -> BitMask {
    BitMask::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// Per-image `(intersection, union)` for two parts and three variants,
/// chosen so the best variant depends on which images are looked at.
pub const SIX_IMAGES: [[[(u64, u64); 3]; 2]; 6] = [
    [[(90, 100), (40, 100), (60, 100)], [(10, 50), (30, 50), (20, 50)]],
    [[(20, 100), (70, 100), (50, 100)], [(40, 60), (10, 60), (30, 60)]],
    [[(55, 80), (50, 80), (70, 80)], [(5, 40), (25, 40), (15, 40)]],
    [[(10, 120), (80, 120), (40, 120)], [(30, 70), (35, 70), (50, 70)]],
    [[(70, 90), (20, 90), (30, 90)], [(20, 30), (5, 30), (10, 30)]],
    [[(30, 60), (35, 60), (50, 60)], [(12, 45), (30, 45), (25, 45)]],
];

pub fn six_image_fixture() -> SelectionData {
    let images: Vec<String> = (0..6).map(|i| format!("im{i}")).collect();
    let parts = vec!["a".to_string(), "b".to_string()];
    let variants = vec!["GGSAM".to_string(), "CGSAM".to_string(), "LGSAM".to_string()];
    let counts = SIX_IMAGES
        .iter()
        .map(|img| {
            img.iter()
                .map(|part| part.iter().map(|&(i, u)| IouCounts { intersection: i, union: u }).collect())
                .collect()
        })
        .collect();
    SelectionData::new(images, parts, variants, counts).expect("well-formed fixture")
}

fn pooled(images: &[usize], part: usize, variant: usize) -> f64 {
    let (i, u) = images.iter().fold((0, 0), |(i, u), &m| {
        let (a, b) = SIX_IMAGES[m][part][variant];
        (i + a, u + b)
    });
    i as f64 / u as f64
}

/// Full-set score of picking, per part, the first variant with the best
/// pooled IoU on `sample`.
pub fn six_image_selection_score(sample: &[usize]) -> f64 {
    let all: Vec<usize> = (0..6).collect();
    let mut sum = 0.0;
    for p in 0..2 {
        let mut best = 0;
        for v in 1..3 {
            if pooled(sample, p, v) > pooled(sample, p, best) {
                best = v;
            }
        }
        sum += pooled(&all, p, best);
    }
    sum / 2.0
}

/// Mean of the selection score over every `k`-image subset of the fixture.
pub fn exhaustive_selection_mean(k: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for bits in 0u32..(1 << 6) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let sample: Vec<usize> = (0..6).filter(|i| bits & (1 << i) != 0).collect();
        total += six_image_selection_score(&sample);
        count += 1;
    }
    total / count as f64
}

/// RBF kernel matrix of the rows of `x`.
pub fn rbf(x: &[Vec<f64>], gamma: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        let d: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        (-gamma * d).exp()
    })
}
