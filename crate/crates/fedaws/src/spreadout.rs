//! The spreadout regularizer and its mined variant.
//!
//! [`reg_sp`] penalizes every ordered pair of class rows whose cosine
//! distance falls below the margin; the double sum is taken literally, so
//! each unordered pair counts twice. [`reg_sp_top`] replaces the hinge with
//! the negated squared distance to each class's `k` nearest classes, which
//! adapts the margin to the local geometry and keeps the cost linear in the
//! number of active classes. Gradients treat the mined neighbor sets as
//! fixed; the selection itself is not differentiated.
//!
//! Mining is brute force over exact distances. At the scales this crate
//! targets that is both the fastest and the only variant that can be checked
//! against a full-sort oracle exactly.

use thiserror::Error;

use crate::losses::Margin;
use crate::math::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum SpreadoutError {
    #[error("k = {k} too large: only {available} other classes available")]
    KTooLarge { k: usize, available: usize },
    #[error("class id {0} out of range")]
    ClassOutOfRange(usize),
}

/// Mining parameters: `k` hardest negatives per class, drawn from a candidate
/// pool of at most `candidate_set_size` classes sampled with `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    pub k: usize,
    pub candidate_set_size: usize,
    pub seed: u64,
}

impl MiningConfig {
    pub fn validate(&self, classes: usize) -> Result<(), SpreadoutError> {
        if self.k < 1 || self.k > classes.saturating_sub(1) {
            return Err(SpreadoutError::KTooLarge { k: self.k, available: classes - 1 });
        }
        if self.candidate_set_size < self.k || self.candidate_set_size > classes {
            return Err(SpreadoutError::KTooLarge {
                k: self.k,
                available: self.candidate_set_size,
            });
        }
        Ok(())
    }
}

fn cosine_distance_rows(w: &Matrix, a: usize, b: usize) -> f64 {
    let mut dot = 0.0;
    for (x, y) in w.row(a).iter().zip(w.row(b)) {
        dot += x * y;
    }
    1.0 - dot
}

/// `sum_c sum_{c' != c} max(0, nu - d_cos(w_c, w_c'))^2` over ordered pairs.
///
/// Rows are assumed unit-norm; the value is 0 exactly when every pairwise
/// distance is at least `nu`.
pub fn reg_sp(w: &Matrix, nu: Margin) -> f64 {
    let c = w.rows();
    let mut total = 0.0;
    for a in 0..c {
        for b in 0..c {
            if a != b {
                let h = (nu.value() - cosine_distance_rows(w, a, b)).max(0.0);
                total += h * h;
            }
        }
    }
    total
}

/// Gradient of [`reg_sp`] with respect to every row.
///
/// Each ordered pair `(a, b)` with an active hinge contributes
/// `2 max(0, nu - 1 + w_a . w_b) w_b` to row `a`'s gradient; both orderings
/// of a pair contribute.
pub fn grad_reg_sp(w: &Matrix, nu: Margin) -> Matrix {
    let c = w.rows();
    let mut grad = Matrix::zeros(c, w.cols());
    for a in 0..c {
        for b in (a + 1)..c {
            let h = (nu.value() - cosine_distance_rows(w, a, b)).max(0.0);
            if h > 0.0 {
                // Terms (a,b) and (b,a): 2h from each ordering on each row.
                let coef = 4.0 * h;
                for j in 0..w.cols() {
                    let ga = grad.get(a, j) + coef * w.get(b, j);
                    grad.set(a, j, ga);
                    let gb = grad.get(b, j) + coef * w.get(a, j);
                    grad.set(b, j, gb);
                }
            }
        }
    }
    grad
}

/// The `k` classes within `candidates` closest to `c` (excluding `c`),
/// ordered ascending by distance with ties broken by smaller id.
pub fn nearest_classes_within(
    w: &Matrix,
    c: usize,
    candidates: &[usize],
    k: usize,
) -> Result<Vec<usize>, SpreadoutError> {
    if c >= w.rows() {
        return Err(SpreadoutError::ClassOutOfRange(c));
    }
    for &y in candidates {
        if y >= w.rows() {
            return Err(SpreadoutError::ClassOutOfRange(y));
        }
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&y| y != c)
        .map(|&y| (cosine_distance_rows(w, c, y), y))
        .collect();
    if k > scored.len() {
        return Err(SpreadoutError::KTooLarge { k, available: scored.len() });
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, y)| y).collect())
}

/// [`nearest_classes_within`] over the full class set.
pub fn nearest_classes(w: &Matrix, c: usize, k: usize) -> Result<Vec<usize>, SpreadoutError> {
    let all: Vec<usize> = (0..w.rows()).collect();
    nearest_classes_within(w, c, &all, k)
}

/// Mined regularizer value:
/// `sum_{c in active} sum_{y in N_k(c)} -d_cos(w_c, w_y)^2`, with `N_k`
/// computed within `candidates`. The value is non-positive; minimizing it
/// pushes every mined pair apart.
pub fn reg_sp_top(
    w: &Matrix,
    active: &[usize],
    candidates: &[usize],
    k: usize,
) -> Result<f64, SpreadoutError> {
    let mut total = 0.0;
    for &c in active {
        for y in nearest_classes_within(w, c, candidates, k)? {
            let d = cosine_distance_rows(w, c, y);
            total -= d * d;
        }
    }
    Ok(total)
}

/// Gradient of [`reg_sp_top`] with the mined sets held fixed.
///
/// For a mined pair `(c, y)` with distance `d`, row `c` receives
/// `2 d w_y` and row `y` receives `2 d w_c`; only active rows and their mined
/// neighbors end up nonzero.
pub fn grad_reg_sp_top(
    w: &Matrix,
    active: &[usize],
    candidates: &[usize],
    k: usize,
) -> Result<Matrix, SpreadoutError> {
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    for &c in active {
        for y in nearest_classes_within(w, c, candidates, k)? {
            let d = cosine_distance_rows(w, c, y);
            // d(-d^2)/dw_c = -2d * d(d)/dw_c = -2d * (-w_y) = 2d w_y.
            for j in 0..w.cols() {
                let gc = grad.get(c, j) + 2.0 * d * w.get(y, j);
                grad.set(c, j, gc);
                let gy = grad.get(y, j) + 2.0 * d * w.get(c, j);
                grad.set(y, j, gy);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{normalize, RngState};
    use crate::model::{finite_difference_gradient, gradient_relative_error};

    fn random_unit_rows(c: usize, d: usize, rng: &mut RngState) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..c).map(|_| normalize(&rng.normal_vec(d)).unwrap()).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn matrix_from_flat(template: &Matrix, flat: &[f64]) -> Matrix {
        Matrix::from_values(template.rows(), template.cols(), flat.to_vec()).unwrap()
    }

    #[test]
    fn reg_sp_trivial_cases() {
        let nu = Margin::new(1.0).unwrap();
        // Single class: empty sum.
        let w = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(reg_sp(&w, nu), 0.0);
        // Two identical rows: ordered-pair count doubles the term.
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(reg_sp(&w, nu), 2.0);
        // Orthonormal rows: all distances exactly 1.
        let w = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(reg_sp(&w, nu), 0.0);
    }

    #[test]
    fn reg_sp_zero_iff_separated() {
        let mut rng = RngState::new(17);
        for _ in 0..50 {
            let w = random_unit_rows(6, 8, &mut rng);
            let mut min_dist = f64::INFINITY;
            for a in 0..6 {
                for b in 0..6 {
                    if a != b {
                        min_dist = min_dist.min(cosine_distance_rows(&w, a, b));
                    }
                }
            }
            let nu = Margin::new(rng.uniform(0.2, 1.8)).unwrap();
            let zero = reg_sp(&w, nu) == 0.0;
            assert_eq!(zero, min_dist >= nu.value());
        }
    }

    #[test]
    fn reg_sp_invariant_under_row_permutation() {
        let mut rng = RngState::new(23);
        let w = random_unit_rows(5, 6, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| w.row(i).to_vec()).collect();
        let shuffled = Matrix::from_rows(&rows).unwrap();
        let nu = Margin::default();
        assert!((reg_sp(&w, nu) - reg_sp(&shuffled, nu)).abs() < 1e-12);
    }

    #[test]
    fn grad_reg_sp_hand_cases() {
        let nu = Margin::new(1.0).unwrap();
        // All pairwise distances at or above nu: hinge inactive everywhere.
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(grad_reg_sp(&w, nu).values().iter().all(|&v| v == 0.0));
        // Two identical rows: gradient on each is 4 * the other row.
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let g = grad_reg_sp(&w, nu);
        assert_eq!(g.row(0), &[4.0, 0.0]);
        assert_eq!(g.row(1), &[4.0, 0.0]);
    }

    #[test]
    fn grad_reg_sp_matches_finite_differences() {
        let mut rng = RngState::new(41);
        let mut checked = 0;
        while checked < 20 {
            let w = random_unit_rows(5, 4, &mut rng);
            let nu = Margin::new(rng.uniform(0.8, 1.8)).unwrap();
            // Skip points where some hinge sits near its kink.
            let near_kink = (0..5).any(|a| {
                (0..5).any(|b| {
                    a != b && (nu.value() - cosine_distance_rows(&w, a, b)).abs() < 1e-3
                })
            });
            if near_kink {
                continue;
            }
            let analytic = grad_reg_sp(&w, nu);
            let numeric = finite_difference_gradient(
                |flat| reg_sp(&matrix_from_flat(&w, flat), nu),
                w.values(),
                1e-6,
            );
            for (a, n) in analytic.values().iter().zip(&numeric) {
                assert!(gradient_relative_error(*a, *n) <= 1e-4, "{a} vs {n}");
            }
            checked += 1;
        }
    }

    #[test]
    fn nearest_classes_hand_case() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(nearest_classes(&w, 0, 1).unwrap(), vec![1]);
        assert_eq!(nearest_classes(&w, 0, 2).unwrap(), vec![1, 2]);
        assert!(matches!(
            nearest_classes(&w, 0, 3),
            Err(SpreadoutError::KTooLarge { .. })
        ));
    }

    #[test]
    fn nearest_classes_matches_full_sort_oracle() {
        let mut rng = RngState::new(55);
        for _ in 0..100 {
            let c = 8 + rng.index(20);
            let w = random_unit_rows(c, 6, &mut rng);
            let q = rng.index(c);
            let k = 1 + rng.index(5.min(c - 1));
            let got = nearest_classes(&w, q, k).unwrap();
            // Full sort of every other class.
            let mut all: Vec<(f64, usize)> = (0..c)
                .filter(|&y| y != q)
                .map(|y| (cosine_distance_rows(&w, q, y), y))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.into_iter().take(k).map(|(_, y)| y).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn nearest_classes_tie_break_by_id() {
        // Classes 1 and 2 are identical, both at distance 1 from class 0.
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(nearest_classes(&w, 0, 1).unwrap(), vec![1]);
    }

    #[test]
    fn reg_sp_top_trivial_cases() {
        // Mutually antipodal candidates at k = 1: each active term is -(2)^2.
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let v = reg_sp_top(&w, &[0, 1], &[0, 1], 1).unwrap();
        assert_eq!(v, -8.0);
        // No active classes: empty sum.
        assert_eq!(reg_sp_top(&w, &[], &[0, 1], 1).unwrap(), 0.0);
    }

    #[test]
    fn reg_sp_top_matches_mine_then_sum_oracle() {
        let mut rng = RngState::new(61);
        for _ in 0..100 {
            let c = 10;
            let w = random_unit_rows(c, 5, &mut rng);
            let candidates: Vec<usize> = (0..c).collect();
            let active = rng.sample_without_replacement(c, 4);
            let k = 2;
            let got = reg_sp_top(&w, &active, &candidates, k).unwrap();
            let mut want = 0.0;
            for &a in &active {
                let mut ds: Vec<(f64, usize)> = (0..c)
                    .filter(|&y| y != a)
                    .map(|y| (cosine_distance_rows(&w, a, y), y))
                    .collect();
                ds.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
                for (d, _) in ds.into_iter().take(k) {
                    want -= d * d;
                }
            }
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reg_sp_top_full_k_degenerates_to_all_pairs() {
        let mut rng = RngState::new(71);
        let c = 7;
        let w = random_unit_rows(c, 4, &mut rng);
        let candidates: Vec<usize> = (0..c).collect();
        let active = vec![1, 3, 6];
        let got = reg_sp_top(&w, &active, &candidates, c - 1).unwrap();
        let mut want = 0.0;
        for &a in &active {
            for y in 0..c {
                if y != a {
                    let d = cosine_distance_rows(&w, a, y);
                    want -= d * d;
                }
            }
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn grad_reg_sp_top_empty_active_is_zero() {
        let mut rng = RngState::new(81);
        let w = random_unit_rows(4, 3, &mut rng);
        let g = grad_reg_sp_top(&w, &[], &[0, 1, 2, 3], 2).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_reg_sp_top_two_candidates_hand_derivation() {
        // Single active class 0, k = 1, candidates {0, 1}: value is
        // -(1 - w0.w1)^2, so d/dw0 = 2(1 - w0.w1) w1 and symmetrically.
        let mut rng = RngState::new(91);
        let w = random_unit_rows(2, 3, &mut rng);
        let g = grad_reg_sp_top(&w, &[0], &[0, 1], 1).unwrap();
        let d = cosine_distance_rows(&w, 0, 1);
        for j in 0..3 {
            assert!((g.get(0, j) - 2.0 * d * w.get(1, j)).abs() < 1e-12);
            assert!((g.get(1, j) - 2.0 * d * w.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_reg_sp_top_matches_finite_differences_away_from_ties() {
        let mut rng = RngState::new(101);
        let c = 6;
        let k = 2;
        let candidates: Vec<usize> = (0..c).collect();
        let mut checked = 0;
        while checked < 20 {
            let w = random_unit_rows(c, 4, &mut rng);
            let active = rng.sample_without_replacement(c, 3);
            // Guard against selection-boundary ties: the k-th and (k+1)-th
            // distances must be separated for every active class.
            let tie_near = active.iter().any(|&a| {
                let mut ds: Vec<f64> = (0..c)
                    .filter(|&y| y != a)
                    .map(|y| cosine_distance_rows(&w, a, y))
                    .collect();
                ds.sort_by(|x, y| x.partial_cmp(y).unwrap());
                ds[k] - ds[k - 1] < 1e-3
            });
            if tie_near {
                continue;
            }
            let analytic = grad_reg_sp_top(&w, &active, &candidates, k).unwrap();
            let numeric = finite_difference_gradient(
                |flat| reg_sp_top(&matrix_from_flat(&w, flat), &active, &candidates, k).unwrap(),
                w.values(),
                1e-6,
            );
            for (a, n) in analytic.values().iter().zip(&numeric) {
                assert!(gradient_relative_error(*a, *n) <= 1e-4, "{a} vs {n}");
            }
            checked += 1;
        }
    }

    #[test]
    fn one_step_from_collapse_increases_minimum_distance() {
        // From an exactly collapsed matrix the first spreadout step must
        // strictly increase the minimum pairwise distance.
        let nu = Margin::new(1.0).unwrap();
        for seed in 0..10 {
            let mut rng = RngState::new(seed);
            let dir = normalize(&rng.normal_vec(6)).unwrap();
            let rows: Vec<Vec<f64>> = (0..4).map(|_| dir.clone()).collect();
            let mut w = Matrix::from_rows(&rows).unwrap();
            // Collapsed: every pairwise distance is 0. Nudge rows apart by a
            // hair so normalization after the step is well posed and the
            // gradient differs per row.
            for c in 0..4 {
                let jitter = rng.normal_vec(6);
                for (j, v) in jitter.iter().enumerate() {
                    let cur = w.get(c, j);
                    w.set(c, j, cur + 1e-4 * v);
                }
                let renorm = normalize(w.row(c)).unwrap();
                w.row_mut(c).copy_from_slice(&renorm);
            }
            let rho_before = min_pairwise(&w);
            let grad = grad_reg_sp(&w, nu);
            let step = 1e-2;
            for c in 0..4 {
                for j in 0..6 {
                    let v = w.get(c, j) - step * grad.get(c, j);
                    w.set(c, j, v);
                }
                let renorm = normalize(w.row(c)).unwrap();
                w.row_mut(c).copy_from_slice(&renorm);
            }
            let rho_after = min_pairwise(&w);
            assert!(
                rho_after > rho_before,
                "seed {seed}: rho {rho_before} -> {rho_after}"
            );
        }
    }

    fn min_pairwise(w: &Matrix) -> f64 {
        let mut min = f64::INFINITY;
        for a in 0..w.rows() {
            for b in (a + 1)..w.rows() {
                min = min.min(cosine_distance_rows(w, a, b));
            }
        }
        min
    }

    #[test]
    fn mining_config_validation() {
        assert!(MiningConfig { k: 1, candidate_set_size: 4, seed: 0 }.validate(4).is_ok());
        assert!(MiningConfig { k: 4, candidate_set_size: 4, seed: 0 }.validate(4).is_err());
        assert!(MiningConfig { k: 2, candidate_set_size: 1, seed: 0 }.validate(4).is_err());
    }
}
