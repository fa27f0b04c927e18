//! Per-step representation probe.
//!
//! One small model is trained per requested forecast step, each with a
//! one-output head on that step alone. If the steps want different
//! representations, the trained encoders' embeddings of the same test
//! windows disagree by more than two runs on the same step with different
//! seeds do.
//!
//! Clouds are compared up to translation, isotropic scale and rotation:
//! both are centered and scaled to unit RMS radius, one is rotated onto the
//! other by orthogonal Procrustes, and the mean distance between paired
//! points is the disparity. A per-model full whitening distance is also
//! reported; it is not rotation-invariant, so it serves only as a
//! diagnostic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::SplitWindows;
use crate::error::{Error, Result};
use crate::linalg::{svd, Mat};
use crate::model::{derive_seed, EncoderSpec};
use crate::train::{train_steps, RunRecord, TrainConfig};

/// Seed stream for probe models.
pub const PROBE_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// 1-based forecast steps, one model each. Repeats are allowed.
    pub steps: Vec<usize>,
    pub encoder: EncoderSpec,
    /// Training settings; `seed` is the base for every probe model.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub step: usize,
    pub seed: u64,
    pub record: RunRecord,
    /// One row per (test window, channel), row `window·D + channel`.
    pub representation: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDisparity {
    /// Indices into [`ProbeReport::runs`].
    pub a: usize,
    pub b: usize,
    pub step_a: usize,
    pub step_b: usize,
    pub disparity: f64,
    pub whitened_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n_test_windows: usize,
    pub channels: usize,
    /// One run per requested step, in request order.
    pub runs: Vec<ProbeRun>,
    /// For each distinct step, a second run that differs only by seed.
    pub replicates: Vec<ProbeRun>,
    /// Every pair of requested runs.
    pub pairs: Vec<PairDisparity>,
    /// Run vs replicate for each distinct step; `a` indexes `runs`, `b`
    /// indexes `replicates`.
    pub baseline_pairs: Vec<PairDisparity>,
    pub mean_pair_disparity: f64,
    pub baseline_disparity: f64,
    /// `mean_pair_disparity / baseline_disparity`.
    pub ratio: f64,
}

fn center(x: &Mat) -> Mat {
    let (n, k) = x.shape();
    let mut out = x.clone();
    for j in 0..k {
        let mean = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[(i, j)] -= mean;
        }
    }
    out
}

/// Centers the columns and scales so the mean squared row norm is 1.
/// A cloud collapsed to a point stays at the origin.
pub fn standardize_isotropic(x: &Mat) -> Mat {
    let out = center(x);
    let rms = (out.frobenius_sq() / x.rows() as f64).sqrt();
    if rms > 0.0 {
        out.scale(1.0 / rms)
    } else {
        out
    }
}

fn mean_row_distance(a: &Mat, b: &Mat) -> Result<f64> {
    let diff = a.sub(b)?;
    let n = diff.rows();
    Ok((0..n)
        .map(|i| diff.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64)
}

fn check_pair(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::shape(
            "disparity",
            format!("clouds {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Mean paired-point distance after isotropic standardization and the
/// best rotation/reflection of `b` onto `a`. Symmetric, and 0 for clouds
/// related by a similarity transform.
pub fn procrustes_disparity(a: &Mat, b: &Mat) -> Result<f64> {
    check_pair(a, b)?;
    let sa = standardize_isotropic(a);
    let sb = standardize_isotropic(b);
    // max tr(Qᵀ BᵀA) over orthogonal Q: Q = U·Vᵀ for BᵀA = UΣVᵀ.
    let m = sb.t_matmul(&sa)?;
    let dec = svd(&m)?;
    let q = dec.u.matmul(&dec.vt)?;
    mean_row_distance(&sb.matmul(&q)?, &sa)
}

/// Centers and multiplies by the inverse square root of the covariance;
/// directions with no variance are dropped.
pub fn whiten(x: &Mat) -> Result<Mat> {
    let n = x.rows();
    let centered = center(x);
    let cov = centered.t_matmul(&centered)?.scale(1.0 / n as f64);
    let dec = svd(&cov)?;
    let tol = dec.rank_tolerance();
    let k = cov.rows();
    let mut inv_sqrt = Mat::zeros(k, k);
    for (p, &s) in dec.sigma.iter().enumerate() {
        if s <= tol || s == 0.0 {
            continue;
        }
        let f = 1.0 / s.sqrt();
        for i in 0..k {
            for j in 0..k {
                inv_sqrt[(i, j)] += dec.u[(i, p)] * f * dec.u[(j, p)];
            }
        }
    }
    centered.matmul(&inv_sqrt)
}

/// Mean paired-point distance between the two clouds after whitening each
/// one separately.
pub fn whitened_distance(a: &Mat, b: &Mat) -> Result<f64> {
    check_pair(a, b)?;
    mean_row_distance(&whiten(a)?, &whiten(b)?)
}

fn pair(runs_a: &[ProbeRun], a: usize, runs_b: &[ProbeRun], b: usize) -> Result<PairDisparity> {
    let (ra, rb) = (&runs_a[a].representation, &runs_b[b].representation);
    Ok(PairDisparity {
        a,
        b,
        step_a: runs_a[a].step,
        step_b: runs_b[b].step,
        disparity: procrustes_disparity(ra, rb)?,
        whitened_distance: whitened_distance(ra, rb)?,
    })
}

fn probe_run(
    windows: &SplitWindows,
    cfg: &ProbeConfig,
    step: usize,
    seed: u64,
    stage: &str,
) -> Result<ProbeRun> {
    let mut train = cfg.train;
    train.seed = seed;
    let (model, record) = train_steps(windows, &cfg.encoder, step - 1..step, &train, stage)?;
    let all: Vec<usize> = (0..windows.test.len()).collect();
    let representation = model.encode(&windows.test.inputs(&all))?.transpose();
    Ok(ProbeRun {
        step,
        seed,
        record,
        representation,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Trains the probe models and measures how far apart their test-window
/// representations are.
pub fn per_step_probe(windows: &SplitWindows, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if cfg.steps.len() < 2 {
        return Err(Error::invalid(
            "probe steps",
            "need at least two steps to compare",
        ));
    }
    if let Some(&bad) = cfg.steps.iter().find(|&&s| s == 0 || s > windows.horizon()) {
        return Err(Error::invalid(
            "probe steps",
            format!("step {bad} outside 1..={}", windows.horizon()),
        ));
    }
    cfg.train.validate()?;
    let base = cfg.train.seed;
    let mut runs = Vec::new();
    for (i, &step) in cfg.steps.iter().enumerate() {
        let seed = derive_seed(base, &[PROBE_STREAM, i as u64, 0]);
        runs.push(probe_run(
            windows,
            cfg,
            step,
            seed,
            &format!("probe.step{step}"),
        )?);
    }
    let mut replicates = Vec::new();
    let mut baseline_pairs = Vec::new();
    for (i, &step) in cfg.steps.iter().enumerate() {
        if cfg.steps[..i].contains(&step) {
            continue;
        }
        let seed = derive_seed(base, &[PROBE_STREAM, i as u64, 1]);
        replicates.push(probe_run(
            windows,
            cfg,
            step,
            seed,
            &format!("probe.step{step}.replicate"),
        )?);
        baseline_pairs.push(pair(&runs, i, &replicates, replicates.len() - 1)?);
    }
    let mut pairs = Vec::new();
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            pairs.push(pair(&runs, a, &runs, b)?);
        }
    }
    let mean_pair_disparity = mean(pairs.iter().map(|p| p.disparity));
    let baseline_disparity = mean(baseline_pairs.iter().map(|p| p.disparity));
    Ok(ProbeReport {
        n_test_windows: windows.test.len(),
        channels: windows.channels(),
        runs,
        replicates,
        pairs,
        baseline_pairs,
        mean_pair_disparity,
        baseline_disparity,
        ratio: mean_pair_disparity / baseline_disparity,
    })
}

/// Writes one run's point cloud as CSV: `window,channel,z0,z1,...`.
pub fn write_points_csv(
    run: &ProbeRun,
    channels: usize,
    writer: impl Write,
    comment: Option<&str>,
) -> Result<()> {
    let mut writer = writer;
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(writer, "# {line}")?;
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let k = run.representation.cols();
    let mut header = vec!["window".to_string(), "channel".to_string()];
    header.extend((0..k).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for i in 0..run.representation.rows() {
        let mut rec = vec![(i / channels).to_string(), (i % channels).to_string()];
        rec.extend(run.representation.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
