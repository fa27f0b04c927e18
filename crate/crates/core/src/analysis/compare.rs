//! Recursive, multi-output and adapted forecasting trained and scored on
//! the same windows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapt::{make_segment_plan, MolaAdapter};
use crate::analysis::bottleneck::{head_bottleneck, HeadBottleneck};
use crate::analysis::variance::{
    compare_variance, variance_report, VarianceComparison, VarianceReport,
};
use crate::data::SplitWindows;
use crate::error::{Error, Result};
use crate::model::{derive_seed, EncoderSpec};
use crate::train::{
    adapt_all_segments, arf_train, error_samples, mtf_train, pretrain, report_from_samples, stream,
    AdaptSchedule, EvalReport, RunRecord, TrainConfig,
};

pub const ARF: &str = "ar-f";
pub const MTF: &str = "mt-f";
pub const MOLA: &str = "mola";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub encoder: EncoderSpec,
    pub segments: usize,
    pub experts: usize,
    pub rank: usize,
    /// Adapted encoder layers; `None` adapts every encoder weight.
    pub layers: Option<Vec<String>>,
    pub schedule: AdaptSchedule,
    /// Foundation for the adapter, and the one-step model for the
    /// recursive baseline.
    pub pretrain: TrainConfig,
    /// The multi-output baseline.
    pub baseline: TrainConfig,
    pub adapt: TrainConfig,
    /// Prefix lengths scored separately; their mean is the average row.
    pub horizons: Vec<usize>,
}

impl CompareConfig {
    /// Copy with every stage seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = seed;
        c.baseline.seed = seed;
        c.adapt.seed = seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadigmResult {
    pub name: String,
    /// Hash of the windows this paradigm was trained and scored on.
    pub window_fingerprint: String,
    pub runs: Vec<RunRecord>,
    pub test: EvalReport,
    pub variance: VarianceReport,
}

/// Relative improvement of the adapter over one baseline, in percent:
/// `100·(baseline − adapter)/baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub over: String,
    pub per_horizon_mse: Vec<f64>,
    pub per_horizon_mae: Vec<f64>,
    pub average_mse: f64,
    pub average_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub horizon: usize,
    pub segments: usize,
    pub window_fingerprint: String,
    /// Every paradigm saw the same windows.
    pub windows_identical: bool,
    /// In order: recursive, multi-output, adapted.
    pub paradigms: Vec<ParadigmResult>,
    pub improvement: Vec<Improvement>,
    /// Adapted loss variance against each baseline. Diagnostic only.
    pub variance: Vec<VarianceComparison>,
    /// Irreducible error of the multi-output head on the test windows.
    pub mtf_bottleneck: HeadBottleneck,
}

impl ComparisonReport {
    pub fn paradigm(&self, name: &str) -> Option<&ParadigmResult> {
        self.paradigms.iter().find(|p| p.name == name)
    }
}

fn pct(base: f64, new: f64) -> f64 {
    100.0 * (base - new) / base
}

fn improvement(base: &ParadigmResult, new: &ParadigmResult) -> Improvement {
    let (b, n) = (&base.test, &new.test);
    Improvement {
        over: base.name.clone(),
        per_horizon_mse: b
            .per_horizon
            .iter()
            .zip(&n.per_horizon)
            .map(|(x, y)| pct(x.mse, y.mse))
            .collect(),
        per_horizon_mae: b
            .per_horizon
            .iter()
            .zip(&n.per_horizon)
            .map(|(x, y)| pct(x.mae, y.mae))
            .collect(),
        average_mse: pct(b.average.mse, n.average.mse),
        average_mae: pct(b.average.mae, n.average.mae),
    }
}

fn score(
    name: &str,
    windows: &SplitWindows,
    runs: Vec<RunRecord>,
    horizons: &[usize],
    predict: &dyn Fn(&crate::Mat) -> Result<crate::Mat>,
) -> Result<ParadigmResult> {
    let (sq, ab) = error_samples(&windows.test, windows.horizon(), predict)?;
    Ok(ParadigmResult {
        name: name.to_string(),
        window_fingerprint: windows.fingerprint(),
        runs,
        test: report_from_samples(&sq, &ab, horizons)?,
        variance: variance_report(&sq)?,
    })
}

/// Trains all three paradigms on `windows` and scores them on its test
/// split over the full window horizon.
pub fn paradigm_compare(windows: &SplitWindows, cfg: &CompareConfig) -> Result<ComparisonReport> {
    let horizon = windows.horizon();
    let plan = make_segment_plan(horizon, cfg.segments)?;
    let h = &cfg.horizons;

    let (arf, arf_rec) = arf_train(windows, &cfg.encoder, &cfg.pretrain)?;
    let arf_res = score(ARF, windows, vec![arf_rec], h, &|x| {
        arf.ar_f_forecast(x, horizon)
    })?;

    let (mtf, mtf_rec) = mtf_train(windows, &cfg.encoder, &cfg.baseline)?;
    let mtf_res = score(MTF, windows, vec![mtf_rec], h, &|x| mtf.forecast(x))?;

    let (foundation, f_rec) = pretrain(windows, &cfg.encoder, plan.seg_len(), &cfg.pretrain)?;
    let adapter = MolaAdapter::new(
        &foundation,
        plan,
        cfg.experts,
        cfg.rank,
        cfg.layers.as_deref(),
        derive_seed(cfg.adapt.seed, &[stream::ADAPTER_INIT]),
    )?;
    let (adapter, outcome) =
        adapt_all_segments(&foundation, adapter, windows, &cfg.adapt, cfg.schedule)?;
    let mut mola_runs = vec![f_rec];
    mola_runs.extend(outcome.runs);
    let mola_res = score(MOLA, windows, mola_runs, h, &|x| {
        adapter.forecast(&foundation, x)
    })?;

    let fp = arf_res.window_fingerprint.clone();
    let windows_identical = [&mtf_res, &mola_res]
        .iter()
        .all(|r| r.window_fingerprint == fp);
    let improvement = vec![
        improvement(&arf_res, &mola_res),
        improvement(&mtf_res, &mola_res),
    ];
    let variance = vec![
        compare_variance(ARF, &arf_res.variance, MOLA, &mola_res.variance)?,
        compare_variance(MTF, &mtf_res.variance, MOLA, &mola_res.variance)?,
    ];
    Ok(ComparisonReport {
        horizon,
        segments: cfg.segments,
        window_fingerprint: fp,
        windows_identical,
        paradigms: vec![arf_res, mtf_res, mola_res],
        improvement,
        variance,
        mtf_bottleneck: head_bottleneck(&mtf, &windows.test)?,
    })
}

/// Across-seed mean and spread of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    /// Half-width of a normal-approximation 95% interval for the mean.
    pub ci95: f64,
}

impl SeedStat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        SeedStat {
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
        }
    }
}

/// One table row: a paradigm at one horizon (`None` is the average).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub paradigm: String,
    pub horizon: Option<usize>,
    pub mse: SeedStat,
    pub mae: SeedStat,
    /// Adapter rows only: improvement of the seed-mean MSE over the
    /// recursive and multi-output baselines, in percent.
    pub delta_mse_vs_arf: Option<f64>,
    pub delta_mse_vs_mtf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
    /// Per-step test MSE of the recursive baseline, averaged over seeds.
    pub arf_per_step_mse: Vec<f64>,
    /// How many seeds had `ΔCov ≥ 0` against the multi-output baseline.
    pub variance_premise_seeds: usize,
}

impl SeedSummary {
    pub fn row(&self, paradigm: &str, horizon: Option<usize>) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.paradigm == paradigm && r.horizon == horizon)
    }

    /// Flat CSV, one row per (paradigm, horizon).
    pub fn write_csv(&self, writer: impl Write, comment: Option<&str>) -> Result<()> {
        let mut writer = writer;
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(writer, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "paradigm",
            "horizon",
            "mse",
            "mse_std",
            "mae",
            "mae_std",
            "delta_mse_vs_arf_pct",
            "delta_mse_vs_mtf_pct",
            "seeds",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.paradigm.clone(),
                r.horizon
                    .map(|h| h.to_string())
                    .unwrap_or_else(|| "avg".into()),
                format!("{:.6}", r.mse.mean),
                format!("{:.6}", r.mse.std),
                format!("{:.6}", r.mae.mean),
                format!("{:.6}", r.mae.std),
                opt(r.delta_mse_vs_arf),
                opt(r.delta_mse_vs_mtf),
                self.seeds.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Aggregates per-seed reports into table rows.
pub fn summarize(seeds: &[u64], reports: &[ComparisonReport]) -> Result<SeedSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("comparison summary", "no reports"))?;
    if reports.len() != seeds.len() {
        return Err(Error::invalid(
            "comparison summary",
            format!("{} reports for {} seeds", reports.len(), seeds.len()),
        ));
    }
    let horizons: Vec<usize> = first.paradigms[0]
        .test
        .per_horizon
        .iter()
        .map(|h| h.horizon)
        .collect();
    let get = |name: &str, r: &ComparisonReport| -> Result<EvalReport> {
        r.paradigm(name)
            .map(|p| p.test.clone())
            .ok_or_else(|| Error::invalid("comparison summary", format!("missing paradigm {name}")))
    };
    let mut rows = Vec::new();
    for name in [ARF, MTF, MOLA] {
        let tests: Vec<EvalReport> = reports
            .iter()
            .map(|r| get(name, r))
            .collect::<Result<_>>()?;
        let mut slots: Vec<Option<usize>> = horizons.iter().map(|&h| Some(h)).collect();
        slots.push(None);
        for (i, slot) in slots.into_iter().enumerate() {
            let pick = |t: &EvalReport| match slot {
                Some(_) => (t.per_horizon[i].mse, t.per_horizon[i].mae),
                None => (t.average.mse, t.average.mae),
            };
            let (mse, mae): (Vec<f64>, Vec<f64>) = tests.iter().map(pick).unzip();
            rows.push(TableRow {
                paradigm: name.to_string(),
                horizon: slot,
                mse: SeedStat::of(&mse),
                mae: SeedStat::of(&mae),
                delta_mse_vs_arf: None,
                delta_mse_vs_mtf: None,
            });
        }
    }
    let lookup: Vec<(String, Option<usize>, f64)> = rows
        .iter()
        .map(|r| (r.paradigm.clone(), r.horizon, r.mse.mean))
        .collect();
    let base = |name: &str, h: Option<usize>| {
        lookup
            .iter()
            .find(|(p, hh, _)| p == name && *hh == h)
            .map(|x| x.2)
    };
    for r in rows.iter_mut().filter(|r| r.paradigm == MOLA) {
        r.delta_mse_vs_arf = base(ARF, r.horizon).map(|b| pct(b, r.mse.mean));
        r.delta_mse_vs_mtf = base(MTF, r.horizon).map(|b| pct(b, r.mse.mean));
    }
    let t = first.horizon;
    let arf_per_step_mse = (0..t)
        .map(|s| {
            reports
                .iter()
                .map(|r| get(ARF, r).map(|e| e.per_step[s].mse))
                .sum::<Result<f64>>()
                .map(|x| x / reports.len() as f64)
        })
        .collect::<Result<_>>()?;
    let variance_premise_seeds = reports
        .iter()
        .filter(|r| {
            r.variance
                .iter()
                .any(|v| v.baseline == MTF && v.premise_holds)
        })
        .count();
    Ok(SeedSummary {
        seeds: seeds.to_vec(),
        rows,
        arf_per_step_mse,
        variance_premise_seeds,
    })
}
