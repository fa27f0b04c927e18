use crate::error::{Error, Result};
use crate::linalg::{svd, Mat};

/// Minimum-norm solution of `min ‖Y − A·X‖_F` via the SVD pseudoinverse.
///
/// Singular values at or below the rank tolerance are treated as zero, so
/// rank-deficient systems return the solution of smallest Frobenius norm.
pub fn least_squares(a: &Mat, y: &Mat) -> Result<Mat> {
    if a.rows() == 0 {
        return Err(Error::shape("least_squares", "A has no rows"));
    }
    if a.rows() != y.rows() {
        return Err(Error::shape(
            "least_squares",
            format!("A is {}x{} but Y has {} rows", a.rows(), a.cols(), y.rows()),
        ));
    }
    let dec = svd(a)?;
    let (n, d) = (a.cols(), y.cols());
    // Uᵀ Y restricted to the leading `rank` directions.
    let uty = dec.u.t_matmul(y)?;
    let mut x = Mat::zeros(n, d);
    for k in 0..dec.rank {
        let inv = 1.0 / dec.sigma[k];
        let coeff: Vec<f64> = uty.row(k).iter().map(|c| c * inv).collect();
        let vk = dec.vt.row(k);
        for (i, vki) in vk.iter().enumerate() {
            for (xj, cj) in x.row_mut(i).iter_mut().zip(&coeff) {
                *xj += vki * cj;
            }
        }
    }
    Ok(x)
}

/// `‖(I − P)Y‖²_F` where `P` projects onto the column space of `A`.
///
/// Uses Householder QR with column pivoting rather than the SVD, so it can
/// serve as an independent check on SVD-based residual formulas.
pub fn projection_residual_sq(a: &Mat, y: &Mat) -> Result<f64> {
    if a.rows() != y.rows() {
        return Err(Error::shape(
            "projection_residual_sq",
            format!("A has {} rows, Y has {}", a.rows(), y.rows()),
        ));
    }
    let (m, n) = a.shape();
    let d = y.cols();
    let mut r = a.clone();
    let mut qty = y.clone();

    let col_norm = |r: &Mat, j: usize, from: usize| -> f64 {
        (from..m).map(|i| r[(i, j)] * r[(i, j)]).sum::<f64>().sqrt()
    };
    let scale = (0..n).map(|j| col_norm(&r, j, 0)).fold(0.0, f64::max);
    let tol = m.max(n) as f64 * scale * 1e-12;

    let mut rank = 0;
    for k in 0..m.min(n) {
        let (piv, best) = (k..n)
            .map(|j| (j, col_norm(&r, j, k)))
            .fold((k, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best <= tol {
            break;
        }
        if piv != k {
            for i in 0..m {
                let tmp = r[(i, k)];
                r[(i, k)] = r[(i, piv)];
                r[(i, piv)] = tmp;
            }
        }
        // Householder vector for r[k.., k].
        let alpha = if r[(k, k)] >= 0.0 { -best } else { best };
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq > 0.0 {
            let apply = |mat: &mut Mat, cols: std::ops::Range<usize>| {
                for j in cols {
                    let dotv: f64 = v
                        .iter()
                        .enumerate()
                        .map(|(t, vi)| vi * mat[(k + t, j)])
                        .sum();
                    let f = 2.0 * dotv / vnorm_sq;
                    for (t, vi) in v.iter().enumerate() {
                        mat[(k + t, j)] -= f * vi;
                    }
                }
            };
            apply(&mut r, k..n);
            apply(&mut qty, 0..d);
        }
        rank += 1;
    }
    Ok((rank..m)
        .map(|i| qty.row(i).iter().map(|x| x * x).sum::<f64>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(
            m,
            n,
            (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_system() {
        let y = Mat::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let x = least_squares(&Mat::identity(2), &y).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-15);
    }

    #[test]
    fn averaging_case() {
        let a = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let y = Mat::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let x = least_squares(&a, &y).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn consistent_system_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(6, 3, &mut rng);
        let x0 = random(3, 2, &mut rng);
        let y = a.matmul(&x0).unwrap();
        let x = least_squares(&a, &y).unwrap();
        let resid = y.sub(&a.matmul(&x).unwrap()).unwrap().frobenius();
        assert!(resid < 1e-10, "{resid}");
        assert!(projection_residual_sq(&a, &y).unwrap() < 1e-20);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(least_squares(&Mat::zeros(3, 2), &Mat::zeros(2, 1)).is_err());
        assert!(least_squares(&Mat::zeros(0, 2), &Mat::zeros(0, 1)).is_err());
    }

    #[test]
    fn minimum_norm_on_rank_deficient_system() {
        // Columns 0 and 1 are identical, so x and x + t·(1, −1, 0) fit equally well.
        let a = Mat::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![2.0, 2.0, 1.0],
            vec![0.0, 0.0, 3.0],
            vec![1.0, 1.0, -1.0],
        ])
        .unwrap();
        let y = Mat::from_rows(&[vec![1.0], vec![0.5], vec![2.0], vec![-1.0]]).unwrap();
        let x = least_squares(&a, &y).unwrap();
        let base = y.sub(&a.matmul(&x).unwrap()).unwrap().frobenius_sq();
        for t in [-1.0, -0.3, 0.2, 0.7, 2.0] {
            let mut alt = x.clone();
            alt[(0, 0)] += t;
            alt[(1, 0)] -= t;
            let r = y.sub(&a.matmul(&alt).unwrap()).unwrap().frobenius_sq();
            assert!((r - base).abs() < 1e-12);
            assert!(alt.frobenius() > x.frobenius());
        }
        assert!((x[(0, 0)] - x[(1, 0)]).abs() < 1e-12);
    }
}
