//! Sequential minimal optimization for the C-SVM dual
//!
//! ```text
//! min  ½ αᵀQα − eᵀα   s.t.  yᵀα = 0,  0 ≤ α_i ≤ C_i,   Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! Working pairs are chosen as the maximal violating pair (first-order
//! selection). Rows of `Q` are computed on demand and kept in a bounded
//! cache keyed by sample index.

use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

const TAU: f64 = 1e-12;

/// Source of kernel values between training samples.
pub trait KernelSource {
    fn len(&self) -> usize;
    fn eval(&self, i: usize, j: usize) -> f64;
}

/// A precomputed kernel matrix, mostly useful for tests and tiny problems.
pub struct DenseKernel {
    pub n: usize,
    pub values: Vec<f64>,
}

impl KernelSource for DenseKernel {
    fn len(&self) -> usize {
        self.n
    }
    fn eval(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Bounded cache of signed kernel rows `Q_i·`.
pub struct RowCache<'a, K: KernelSource> {
    kernel: &'a K,
    y: &'a [f64],
    rows: HashMap<usize, Rc<[f64]>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a, K: KernelSource> RowCache<'a, K> {
    pub fn new(kernel: &'a K, y: &'a [f64], capacity: usize) -> Self {
        Self { kernel, y, rows: HashMap::new(), order: VecDeque::new(), capacity: capacity.max(2) }
    }

    pub fn row(&mut self, i: usize) -> Rc<[f64]> {
        if let Some(r) = self.rows.get(&i) {
            return r.clone();
        }
        let yi = self.y[i];
        let row: Rc<[f64]> = (0..self.kernel.len()).map(|k| yi * self.y[k] * self.kernel.eval(i, k)).collect();
        if self.rows.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.rows.remove(&old);
            }
        }
        self.rows.insert(i, row.clone());
        self.order.push_back(i);
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoParams {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Maximum number of cached `Q` rows.
    pub cache_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    /// Offset such that the decision value is `Σ α_j y_j K(x_j, x) − rho`.
    pub rho: f64,
    pub iterations: usize,
    /// Maximal KKT violation `m(α) − M(α)` at exit.
    pub kkt_gap: f64,
    pub converged: bool,
    /// Gradient `Qα − e` at exit.
    pub gradient: Vec<f64>,
}

impl SmoSolution {
    /// Dual objective `½ αᵀQα − eᵀα`, recomputed from scratch.
    pub fn objective<K: KernelSource>(&self, kernel: &K, y: &[f64]) -> f64 {
        dual_objective(kernel, y, &self.alpha)
    }
}

pub fn dual_objective<K: KernelSource>(kernel: &K, y: &[f64], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel.eval(i, j);
        }
    }
    0.5 * quad - alpha.iter().sum::<f64>()
}

fn in_up(alpha: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && alpha < c) || (y < 0.0 && alpha > 0.0)
}

fn in_low(alpha: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && alpha > 0.0) || (y < 0.0 && alpha < c)
}

/// Maximal violating pair `(i, j, m − M)`, or `None` if either set is empty.
fn select_pair(alpha: &[f64], y: &[f64], c: &[f64], grad: &[f64]) -> Option<(usize, usize, f64)> {
    let mut i = None;
    let mut m = f64::NEG_INFINITY;
    let mut j = None;
    let mut big_m = f64::INFINITY;
    for t in 0..alpha.len() {
        let v = -y[t] * grad[t];
        if in_up(alpha[t], y[t], c[t]) && v > m {
            m = v;
            i = Some(t);
        }
        if in_low(alpha[t], y[t], c[t]) && v < big_m {
            big_m = v;
            j = Some(t);
        }
    }
    Some((i?, j?, m - big_m))
}

fn compute_rho(alpha: &[f64], y: &[f64], c: &[f64], grad: &[f64]) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c[t] {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Solves the dual. `y` holds ±1 labels and `c` the per-sample upper bounds.
pub fn solve<K: KernelSource>(kernel: &K, y: &[f64], c: &[f64], params: &SmoParams) -> SmoSolution {
    let n = kernel.len();
    assert_eq!(y.len(), n);
    assert_eq!(c.len(), n);
    let diag: Vec<f64> = (0..n).map(|i| kernel.eval(i, i)).collect();
    let mut cache = RowCache::new(kernel, y, params.cache_rows);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    let mut converged = false;

    while iterations < params.max_iterations {
        let Some((i, j, g)) = select_pair(&alpha, y, c, &grad) else {
            gap = 0.0;
            converged = true;
            break;
        };
        gap = g;
        if gap < params.tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let qi = cache.row(i);
        let qj = cache.row(j);
        let (ci, cj) = (c[i], c[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);

        if y[i] != y[j] {
            let quad = (diag[i] + diag[j] + 2.0 * qi[j]).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let quad = (diag[i] + diag[j] - 2.0 * qi[j]).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for k in 0..n {
            grad[k] += qi[k] * di + qj[k] * dj;
        }
    }

    if !converged {
        if let Some((_, _, g)) = select_pair(&alpha, y, c, &grad) {
            gap = g;
            converged = gap < params.tolerance;
        }
    }

    debug_assert!(alpha.iter().zip(c).all(|(a, c)| *a >= 0.0 && a <= c));
    let rho = compute_rho(&alpha, y, c, &grad);
    SmoSolution { alpha, rho, iterations, kkt_gap: gap, converged, gradient: grad }
}

/// Largest violation of `0 ≤ α ≤ C` and `|yᵀα|`.
pub fn feasibility_violation(alpha: &[f64], y: &[f64], c: &[f64]) -> f64 {
    let bounds = alpha
        .iter()
        .zip(c)
        .map(|(a, c)| (-a).max(a - c).max(0.0))
        .fold(0.0, f64::max);
    let eq: f64 = alpha.iter().zip(y).map(|(a, y)| a * y).sum();
    bounds.max(eq.abs())
}

/// Decision values on the training samples using cached `Q` rows.
pub fn training_decisions<K: KernelSource>(kernel: &K, y: &[f64], sol: &SmoSolution, cache_rows: usize) -> Vec<f64> {
    let mut cache = RowCache::new(kernel, y, cache_rows);
    (0..kernel.len())
        .map(|i| {
            let row = cache.row(i);
            // Q_ik = y_i y_k K_ik, so y_i Σ_k α_k Q_ik = Σ_k α_k y_k K_ik.
            let s: f64 = sol.alpha.iter().zip(row.iter()).map(|(a, q)| a * q).sum();
            y[i] * s - sol.rho
        })
        .collect()
}
