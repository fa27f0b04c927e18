//! One-sided (Hestenes) Jacobi SVD.
//!
//! The columns of a working copy of `A` (or `Aᵀ` when `A` is wide) are
//! orthogonalized by plane rotations accumulated into `V`. On convergence the
//! column norms are the singular values and the normalized columns are the
//! leading left singular vectors; the rest of `U` is completed to an
//! orthonormal basis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;

/// A pair is treated as orthogonal once `|bₚ·b_q| ≤ TOL · ‖bₚ‖‖b_q‖`.
const ROTATION_TOL: f64 = 1e-14;

/// Relative factor in the numerical-rank threshold `max(m,n)·σ₁·RANK_EPS`.
const RANK_EPS: f64 = 1e-12;

/// Full singular value decomposition `A = U · diag(σ) · Vᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    /// m×m orthogonal.
    pub u: Mat,
    /// min(m,n) singular values, descending.
    pub sigma: Vec<f64>,
    /// n×n orthogonal; row i is the i-th right singular vector.
    pub vt: Mat,
    /// Number of singular values above the rank tolerance.
    pub rank: usize,
}

impl SvdResult {
    /// Threshold below which a singular value counts as zero.
    pub fn rank_tolerance(&self) -> f64 {
        let (m, n) = (self.u.rows(), self.vt.rows());
        m.max(n) as f64 * self.sigma.first().copied().unwrap_or(0.0) * RANK_EPS
    }

    /// Rebuilds `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Mat {
        let (m, n) = (self.u.rows(), self.vt.rows());
        let mut out = Mat::zeros(m, n);
        for (k, &s) in self.sigma.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u[(i, k)] * s;
                for j in 0..n {
                    out[(i, j)] += us * self.vt[(k, j)];
                }
            }
        }
        out
    }
}

pub fn svd(a: &Mat) -> Result<SvdResult> {
    if !a.is_finite() {
        let pos = a.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite {
            row: pos / a.cols().max(1),
            col: pos % a.cols().max(1),
        });
    }
    let (m, n) = a.shape();
    if m >= n {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
            rank: t.rank,
        })
    }
}

/// SVD of an m×n matrix with m ≥ n.
fn jacobi_tall(a: &Mat) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Work column-major: cols[j] is column j of the working matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // Columns this small are round-off left from a rank deficiency; their
    // mutual angles are noise, so they are never rotated.
    let frob = a.frobenius();
    let negligible_sq = (m as f64 * f64::EPSILON * frob).powi(2);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = gram(&cols[p], &cols[q]);
                if gamma == 0.0
                    || alpha <= negligible_sq
                    || beta <= negligible_sq
                    || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let rank_tol = m.max(n) as f64 * sigma_max * RANK_EPS;
    let rank = sigma.iter().filter(|&&s| s > rank_tol).count();

    // Columns with non-negligible norm give left singular vectors directly;
    // the remainder of U is an orthonormal completion.
    let keep_tol = m.max(n) as f64 * sigma_max * f64::EPSILON;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (&j, &s) in order.iter().zip(&sigma) {
        if s <= keep_tol || s == 0.0 {
            break;
        }
        let mut u: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
        if orthonormalize_against(&mut u, &basis) {
            basis.push(u);
        } else {
            break;
        }
    }
    complete_basis(&mut basis, m);

    let mut u = Mat::zeros(m, m);
    for (k, col) in basis.iter().enumerate() {
        for i in 0..m {
            u[(i, k)] = col[i];
        }
    }
    let mut vt = Mat::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    Ok(SvdResult { u, sigma, vt, rank })
}

fn gram(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        a += xi * xi;
        b += yi * yi;
        g += xi * yi;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Two passes of modified Gram-Schmidt against `basis`, then normalization.
/// Returns false if `u` is numerically inside the span of `basis`.
fn orthonormalize_against(u: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let start = norm(u);
    if start == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for b in basis {
            let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in u.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
    }
    let left = norm(u);
    if left <= 0.5 * start {
        return false;
    }
    for x in u.iter_mut() {
        *x /= left;
    }
    true
}

/// Extends `basis` to `m` orthonormal vectors, each time taking the unit
/// axis with the largest component outside the current span.
fn complete_basis(basis: &mut Vec<Vec<f64>>, m: usize) {
    while basis.len() < m {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut u = vec![0.0; m];
            u[e] = 1.0;
            for b in basis.iter() {
                let d = b[e];
                for (x, y) in u.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
            let left = norm(&u);
            if best.as_ref().is_none_or(|(n, _)| left > *n) {
                best = Some((left, u));
            }
        }
        // The residuals' squared norms sum to m − len, so the best is at
        // least √((m − len)/m) and the second pass below is well conditioned.
        let (_, mut u) = best.expect("m > 0");
        let kept = orthonormalize_against(&mut u, basis);
        debug_assert!(kept);
        basis.push(u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            m,
            n,
            (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn orthogonality_error(q: &Mat) -> f64 {
        q.t_matmul(q)
            .unwrap()
            .max_abs_diff(&Mat::identity(q.cols()))
            .unwrap()
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd(&Mat::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        assert_eq!(s.rank, 3);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let s = svd(&Mat::zeros(2, 4)).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        assert_eq!(s.rank, 0);
        assert!(orthogonality_error(&s.u) < 1e-15);
        assert!(orthogonality_error(&s.vt.transpose()) < 1e-15);
    }

    #[test]
    fn reconstructs_random_tall_matrix() {
        let a = random(5, 3, 7);
        let s = svd(&a).unwrap();
        let rel = s.reconstruct().sub(&a).unwrap().frobenius() / a.frobenius();
        assert!(rel < 1e-10, "relative reconstruction error {rel}");
        assert!(orthogonality_error(&s.u) < 1e-10);
        assert!(orthogonality_error(&s.vt.transpose()) < 1e-10);
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(s.rank, 3);
    }

    #[test]
    fn wide_and_rank_deficient() {
        // Third row duplicates the first.
        let mut a = random(4, 6, 11);
        let r0 = a.row(0).to_vec();
        a.row_mut(2).copy_from_slice(&r0);
        let s = svd(&a).unwrap();
        assert_eq!(s.rank, 3);
        assert!(s.sigma[3] < 1e-12);
        let rel = s.reconstruct().sub(&a).unwrap().frobenius() / a.frobenius();
        assert!(rel < 1e-10);
        assert!(orthogonality_error(&s.u) < 1e-10);
        assert!(orthogonality_error(&s.vt.transpose()) < 1e-10);
    }

    #[test]
    fn heavily_rank_deficient_tall_matrix() {
        // 11×7 with rank 4: rows 4.. repeat rows 0..4, the last columns
        // repeat earlier ones.
        let base = random(4, 4, 21);
        let mut a = Mat::zeros(11, 7);
        for i in 0..11 {
            for j in 0..7 {
                a[(i, j)] = base[(i % 4, j % 4)];
            }
        }
        let s = svd(&a).unwrap();
        assert_eq!(s.rank, 4);
        assert!(orthogonality_error(&s.u) < 1e-10);
        assert!(orthogonality_error(&s.vt.transpose()) < 1e-10);
        let rel = s.reconstruct().sub(&a).unwrap().frobenius() / a.frobenius();
        assert!(rel < 1e-10);
    }

    #[test]
    fn completes_basis_with_many_missing_directions() {
        for (m, n) in [(11, 1), (12, 3), (30, 2)] {
            let s = svd(&random(m, n, m as u64)).unwrap();
            assert_eq!(s.u.shape(), (m, m));
            assert!(orthogonality_error(&s.u) < 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn decomposes_rank_deficient_shapes(
            m in 1usize..14, n in 1usize..14, k in 1usize..6, seed in proptest::prelude::any::<u64>(),
        ) {
            // Product of m×k and k×n factors has rank ≤ k.
            let a = random(m, k, seed).matmul(&random(k, n, seed ^ 1)).unwrap();
            let s = svd(&a).unwrap();
            proptest::prop_assert!(s.rank <= k.min(m).min(n));
            proptest::prop_assert!(orthogonality_error(&s.u) < 1e-10);
            proptest::prop_assert!(orthogonality_error(&s.vt.transpose()) < 1e-10);
            let err = s.reconstruct().sub(&a).unwrap().frobenius();
            proptest::prop_assert!(err <= 1e-10 * a.frobenius().max(1.0));
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Mat::zeros(2, 2);
        a.data_mut()[3] = f64::INFINITY;
        assert!(matches!(svd(&a), Err(Error::NonFinite { row: 1, col: 1 })));
    }
}
