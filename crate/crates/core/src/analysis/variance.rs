//! Variance of a horizon-averaged loss, split into per-step variances and
//! cross-step covariances.
//!
//! For `L = (1/T)·Σ_t L_t`: `Var(L) = (1/T²)·(Σ_t Var(L_t) + 2·Σ_{t<s} Cov(L_t, L_s))`.
//! Every moment here is the unbiased sample estimate (divisor `n − 1`), so
//! the identity also holds exactly for the estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// samples × T.
    pub per_step_loss_samples: Mat,
    /// Variance of the per-sample mean over steps, computed directly.
    pub var_total: f64,
    /// `Var(L_t)` for each step.
    pub var_terms: Vec<f64>,
    /// `Σ_{t<s} Cov(L_t, L_s)`.
    pub cov_sum: f64,
    /// T×T sample covariance of the per-step losses.
    pub covariance: Mat,
    /// `|var_total − (Σ var_terms + 2·cov_sum)/T²|`.
    pub identity_gap: f64,
}

impl VarianceReport {
    pub fn samples(&self) -> usize {
        self.per_step_loss_samples.rows()
    }

    pub fn horizon(&self) -> usize {
        self.per_step_loss_samples.cols()
    }

    /// Whether the identity holds to `1e-10·max(1, var_total)`.
    pub fn identity_holds(&self) -> bool {
        self.identity_gap <= 1e-10 * self.var_total.max(1.0)
    }
}

fn sample_var(xs: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let mean = xs.clone().sum::<f64>() / n as f64;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
}

/// Decomposes the variance of the step-averaged loss. Needs at least two
/// samples and one step.
pub fn variance_report(per_step_losses: &Mat) -> Result<VarianceReport> {
    let (n, t) = per_step_losses.shape();
    if n < 2 || t == 0 {
        return Err(Error::invalid(
            "variance samples",
            format!("need ≥ 2 samples of ≥ 1 step, got {n}×{t}"),
        ));
    }
    if !per_step_losses.is_finite() {
        return Err(Error::invalid("variance samples", "non-finite loss"));
    }
    let x = per_step_losses;
    let means: Vec<f64> = (0..t)
        .map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    let covariance = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let var_terms: Vec<f64> = (0..t).map(|j| covariance[(j, j)]).collect();
    let mut cov_sum = 0.0;
    for a in 0..t {
        for b in a + 1..t {
            cov_sum += covariance[(a, b)];
        }
    }
    let totals = (0..n).map(|i| x.row(i).iter().sum::<f64>() / t as f64);
    let var_total = sample_var(totals, n);
    let t2 = (t * t) as f64;
    let identity_gap = (var_total - (var_terms.iter().sum::<f64>() + 2.0 * cov_sum) / t2).abs();
    Ok(VarianceReport {
        per_step_loss_samples: x.clone(),
        var_total,
        var_terms,
        cov_sum,
        covariance,
        identity_gap,
    })
}

/// Two paradigms' loss variances side by side, with the cross-step
/// covariance difference `ΔCov = Cov_baseline − Cov_candidate`.
///
/// Fewer-variance claims rest on `ΔCov ≥ 0`, an assumption about
/// training rather than an algebraic fact; this report only states
/// whether it and the resulting ordering happened to hold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub baseline: String,
    pub candidate: String,
    pub var_total_baseline: f64,
    pub var_total_candidate: f64,
    /// `Σ Var_baseline(L_t) − Σ Var_candidate(L_t)`.
    pub delta_var_terms: f64,
    /// `Σ_{t<s} ΔCov(L_t, L_s)`.
    pub delta_cov_sum: f64,
    /// Pairs `t < s` with `ΔCov ≥ 0`, out of `pairs`.
    pub nonnegative_pairs: usize,
    pub pairs: usize,
    /// `delta_cov_sum ≥ 0`.
    pub premise_holds: bool,
    /// `var_total_candidate ≤ var_total_baseline`.
    pub candidate_lower_variance: bool,
    /// `|(var_b − var_c) − (delta_var_terms + 2·delta_cov_sum)/T²|`.
    pub decomposition_gap: f64,
}

pub fn compare_variance(
    baseline_name: &str,
    baseline: &VarianceReport,
    candidate_name: &str,
    candidate: &VarianceReport,
) -> Result<VarianceComparison> {
    let t = baseline.horizon();
    if candidate.horizon() != t {
        return Err(Error::shape(
            "compare_variance",
            format!("horizons {t} and {}", candidate.horizon()),
        ));
    }
    let mut nonnegative_pairs = 0;
    let mut pairs = 0;
    for a in 0..t {
        for b in a + 1..t {
            pairs += 1;
            if baseline.covariance[(a, b)] - candidate.covariance[(a, b)] >= 0.0 {
                nonnegative_pairs += 1;
            }
        }
    }
    let delta_var_terms =
        baseline.var_terms.iter().sum::<f64>() - candidate.var_terms.iter().sum::<f64>();
    let delta_cov_sum = baseline.cov_sum - candidate.cov_sum;
    let diff = baseline.var_total - candidate.var_total;
    Ok(VarianceComparison {
        baseline: baseline_name.to_string(),
        candidate: candidate_name.to_string(),
        var_total_baseline: baseline.var_total,
        var_total_candidate: candidate.var_total,
        delta_var_terms,
        delta_cov_sum,
        nonnegative_pairs,
        pairs,
        premise_holds: delta_cov_sum >= 0.0,
        candidate_lower_variance: candidate.var_total <= baseline.var_total,
        decomposition_gap: (diff - (delta_var_terms + 2.0 * delta_cov_sum) / (t * t) as f64).abs(),
    })
}
