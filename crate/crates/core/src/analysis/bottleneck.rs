//! Irreducible error of a shared-representation linear head.
//!
//! A head `Ŷ = W·R + b·1ᵀ` can only produce columns in the span of
//! `W̄ = [W b]`. With `W̄ = U Σ Vᵀ`, the best any representation can do on a
//! label block `Y` leaves the energy of `Y` along the left singular
//! directions past the rank: `Σ_{t ≥ rank} ‖U_tᵀ Y‖²` (0-based `t`).

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::linalg::{projection_residual_sq, svd, Mat, SvdResult};
use crate::model::{bias_name, weight_name, FoundationModel, HEAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckReport {
    /// `[W b]`, T×(L+1).
    pub wbar: Mat,
    pub svd: SvdResult,
    pub rank: usize,
    /// SVD formula: null-direction energy of the labels.
    pub min_error_sq: f64,
    /// Squared residual of projecting `Y` onto the column space of `W̄`,
    /// computed by pivoted QR.
    pub ls_residual_sq: f64,
    /// `‖U_tᵀY‖²` for each direction past the rank, in order.
    pub per_direction_energy: Vec<f64>,
    /// Residual when the bias coordinate is pinned to 1: projection of
    /// `Y − b·1ᵀ` onto the column space of `W` alone. Never below
    /// `min_error_sq`.
    pub pinned_residual_sq: f64,
}

/// Energy of each row of `UᵀY` from `from` onwards.
fn null_energy(u: &Mat, y: &Mat, from: usize) -> Result<Vec<f64>> {
    let uty = u.t_matmul(y)?;
    Ok((from..uty.rows())
        .map(|t| uty.row(t).iter().map(|v| v * v).sum())
        .collect())
}

/// Builds `W̄`, evaluates the SVD formula and both projection oracles.
pub fn min_attainable_error(w: &Mat, b: &[f64], y: &Mat) -> Result<BottleneckReport> {
    let t = w.rows();
    if t == 0 || b.len() != t || y.rows() != t {
        return Err(Error::shape(
            "min_attainable_error",
            format!("W {:?}, b {}, Y {:?}", w.shape(), b.len(), y.shape()),
        ));
    }
    for m in [w, y] {
        if !m.is_finite() {
            return Err(Error::invalid("bottleneck input", "non-finite entry"));
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("bottleneck input", "non-finite bias"));
    }
    let bias = Mat::column_vector(b)?;
    let wbar = w.append_column(&bias)?;
    let dec = svd(&wbar)?;
    let per_direction_energy = null_energy(&dec.u, y, dec.rank)?;
    let min_error_sq = per_direction_energy.iter().sum();
    let ls_residual_sq = projection_residual_sq(&wbar, y)?;

    let mut shifted = y.clone();
    for (i, bi) in b.iter().enumerate() {
        for v in shifted.row_mut(i) {
            *v -= bi;
        }
    }
    let pinned_residual_sq = projection_residual_sq(w, &shifted)?;

    Ok(BottleneckReport {
        rank: dec.rank,
        svd: dec,
        wbar,
        min_error_sq,
        ls_residual_sq,
        per_direction_energy,
        pinned_residual_sq,
    })
}

/// Bottleneck of a trained head over every window of a set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBottleneck {
    pub horizon: usize,
    pub rep_dim: usize,
    pub rank: usize,
    pub n_windows: usize,
    /// Mean over windows of the per-window minimum error.
    pub mean_min_error_sq: f64,
    /// Mean over windows of the head's actual squared error `‖Ŷ − Y‖²`.
    pub mean_realized_sq: f64,
    /// Windows whose realized error fell below the minimum by more than
    /// round-off; always 0 for a correct analysis.
    pub violations: usize,
}

/// Applies the per-window bound to a direct multi-step model: the SVD of
/// its head is taken once and each test label block is scored against it.
pub fn head_bottleneck(model: &FoundationModel, set: &WindowSet) -> Result<HeadBottleneck> {
    let horizon = model.head_out();
    if horizon > set.horizon() {
        return Err(Error::shape(
            "head_bottleneck",
            format!(
                "head predicts {horizon} steps, windows carry {}",
                set.horizon()
            ),
        ));
    }
    let w = model.params().get(&weight_name(HEAD))?;
    let b = model.params().get(&bias_name(HEAD))?;
    let wbar = w.append_column(b)?;
    let dec = svd(&wbar)?;
    let n = set.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut min_sum = 0.0;
    let mut real_sum = 0.0;
    let mut violations = 0;
    for i in 0..n {
        let idx = [i];
        let y = set.labels(&idx, 0..horizon)?;
        let pred = model.forecast(&set.inputs(&idx))?;
        let min: f64 = null_energy(&dec.u, &y, dec.rank)?.iter().sum();
        let real = pred.sub(&y)?.frobenius_sq();
        if real < min - 1e-9 * min.max(1.0) {
            violations += 1;
        }
        min_sum += min;
        real_sum += real;
    }
    Ok(HeadBottleneck {
        horizon,
        rep_dim: w.cols(),
        rank: dec.rank,
        n_windows: n,
        mean_min_error_sq: min_sum / n as f64,
        mean_realized_sq: real_sum / n as f64,
        violations,
    })
}
