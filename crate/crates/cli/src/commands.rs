//! One function per subcommand. Each reads what it needs from the run
//! directory, writes its outputs through [`RunDir`], and prints a short
//! summary to stdout.

use std::io::Write;
use std::path::Path;

use mola_core::adapt::{make_segment_plan, MolaAdapter};
use mola_core::analysis::compare::{paradigm_compare, summarize, CompareConfig};
use mola_core::analysis::probe::{per_step_probe, write_points_csv, ProbeConfig};
use mola_core::analysis::{
    compare_variance, head_bottleneck, param_counts, variance_report, VarianceReport,
};
use mola_core::data::{
    write_csv, ChannelStats, SeriesDataset, SplitKind, SplitWindows, SynthSpec, WindowSet,
};
use mola_core::model::{derive_seed, FoundationModel};
use mola_core::train::{
    adapt_all_segments, arf_train, error_samples, mtf_train, pretrain, report_from_samples, stream,
    EvalReport,
};
use mola_core::Mat;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Format, Paradigm, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{baseline_checkpoint, names, read_checkpoint, read_payload, RunDir};

/// Names accepted where a command takes a paradigm.
pub const PARADIGMS: [&str; 3] = ["ar-f", "mt-f", "mola"];

fn mola_fields(
    cfg: &RunConfig,
    command: &str,
) -> CliResult<(usize, usize, usize, Option<Vec<String>>)> {
    match &cfg.paradigm {
        Paradigm::Mola {
            segments,
            experts,
            rank,
            layers,
            ..
        } => Ok((*segments, *experts, *rank, layers.clone())),
        other => Err(CliError::user(format!(
            "`{command}` needs `[paradigm] kind = \"mola\"`, the config selects {}",
            other.name()
        ))),
    }
}

fn data(cfg: &RunConfig) -> CliResult<(SeriesDataset, SplitWindows)> {
    let ds = cfg.load_dataset()?;
    let w = cfg.windows(&ds)?;
    Ok((ds, w))
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    synth: &'a SynthSpec,
    rows: usize,
    channels: usize,
    /// SHA-256 of the CSV body after the comment lines.
    body_sha256: String,
}

/// Writes the configured (or manifest-recorded) synthetic series as CSV.
pub fn synth(cfg: &RunConfig, rd: &mut RunDir, from_manifest: Option<&Path>) -> CliResult<()> {
    let spec: SynthSpec = match from_manifest {
        Some(p) => serde_json::from_value(
            read_payload(p, "synth")?
                .get("synth")
                .cloned()
                .unwrap_or_default(),
        )
        .map_err(|e| CliError::user(format!("{}: bad synth spec: {e}", p.display())))?,
        None => cfg
            .dataset
            .synth
            .clone()
            .ok_or_else(|| CliError::user("`synth` needs a [dataset.synth] section"))?,
    };
    let ds = spec.generate()?;
    let mut body = Vec::new();
    write_csv(ds.values(), ds.channel_names(), &mut body, None)?;
    let comment = rd.comment();
    let csv_path = rd.write_with(names::SYNTH_CSV, |f| {
        for line in comment.lines() {
            writeln!(f, "# {line}")?;
        }
        f.write_all(&body)?;
        Ok(())
    })?;
    let manifest = SynthManifest {
        synth: &spec,
        rows: ds.len(),
        channels: ds.channels(),
        body_sha256: hex::encode(Sha256::digest(&body)),
    };
    rd.write_json("data/synth.manifest.json", "synth", &manifest)?;
    println!(
        "wrote {} ({} rows x {} channels, body sha256 {})",
        csv_path.display(),
        ds.len(),
        ds.channels(),
        &manifest.body_sha256[..16]
    );
    Ok(())
}

/// Trains the foundation on the first `T/K` steps.
pub fn pretrain_cmd(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let (segments, ..) = mola_fields(cfg, "pretrain")?;
    let (_, w) = data(cfg)?;
    let seg_len = cfg.dataset.horizon / segments;
    let (f, rec) = pretrain(&w, &cfg.encoder(), seg_len, &cfg.train.pretraining())?;
    rd.write_checkpoint(names::FOUNDATION, &f.to_json()?)?;
    rd.write_json("records/pretrain.json", "record", &rec)?;
    println!(
        "pretrain: {}-step head, best epoch {} of {}, val {:.6}",
        seg_len,
        rec.best_epoch,
        rec.epochs.len(),
        rec.best_val_loss
    );
    Ok(())
}

fn load_foundation(rd: &RunDir, cfg: &RunConfig) -> CliResult<FoundationModel> {
    let mut f = FoundationModel::from_json(&read_checkpoint(&rd.path(names::FOUNDATION))?)?;
    if f.encoder() != &cfg.encoder() {
        return Err(CliError::user(format!(
            "foundation encoder {:?} differs from the configured {:?}",
            f.encoder(),
            cfg.encoder()
        )));
    }
    f.freeze();
    Ok(f)
}

/// Adapts a frozen foundation to every segment of the horizon.
pub fn adapt(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let (segments, experts, rank, layers) = mola_fields(cfg, "adapt")?;
    let Paradigm::Mola { schedule, .. } = cfg.paradigm else {
        unreachable!("checked by mola_fields")
    };
    let f = load_foundation(rd, cfg)?;
    let t = cfg.dataset.horizon;
    if f.head_out() * segments != t {
        return Err(CliError::user(format!(
            "foundation head_out is {} but T/K = {t}/{segments} = {}; pretrain with the same horizon and segment count",
            f.head_out(),
            t / segments
        )));
    }
    let (_, w) = data(cfg)?;
    let plan = make_segment_plan(t, segments)?;
    let adapt_cfg = cfg.train.adaptation();
    let seed = derive_seed(adapt_cfg.seed, &[stream::ADAPTER_INIT]);
    let ad = MolaAdapter::new(&f, plan, experts, rank, layers.as_deref(), seed)?;
    let (ad, outcome) = adapt_all_segments(&f, ad, &w, &adapt_cfg, schedule)?;
    rd.write_checkpoint(names::ADAPTER, &ad.to_json()?)?;
    rd.write_json("records/adapt.json", "outcome", &outcome)?;
    for sv in &outcome.segment_val {
        rd.write_json(
            &format!("records/adapt.segment{}.json", sv.segment),
            "segment",
            sv,
        )?;
        println!(
            "adapt: segment {} val {:.6} -> {:.6}",
            sv.segment, sv.initial, sv.best
        );
    }
    Ok(())
}

/// Trains the recursive or multi-output baseline.
pub fn train_baseline(cfg: &RunConfig, rd: &mut RunDir, paradigm: Option<&str>) -> CliResult<()> {
    let name = match paradigm {
        Some(p) => p,
        None => match cfg.paradigm {
            Paradigm::Mola { .. } => {
                return Err(CliError::user(
                    "the config selects mola; pass --paradigm ar-f or --paradigm mt-f",
                ))
            }
            ref p => p.name(),
        },
    };
    let (_, w) = data(cfg)?;
    let enc = cfg.encoder();
    let (m, rec) = match name {
        "ar-f" => arf_train(&w, &enc, &cfg.train.baseline())?,
        "mt-f" => mtf_train(&w, &enc, &cfg.train.baseline())?,
        other => return Err(CliError::user(format!("unknown baseline '{other}'"))),
    };
    rd.write_checkpoint(baseline_checkpoint(name), &m.to_json()?)?;
    rd.write_json(&format!("records/{name}.json"), "record", &rec)?;
    println!(
        "{name}: best epoch {} of {}, val {:.6}",
        rec.best_epoch,
        rec.epochs.len(),
        rec.best_val_loss
    );
    Ok(())
}

/// A trained forecaster of any paradigm, loaded from the run directory.
enum Forecaster {
    Recursive(FoundationModel),
    Direct(FoundationModel),
    Mixture(FoundationModel, MolaAdapter),
}

impl Forecaster {
    fn load(rd: &RunDir, cfg: &RunConfig, name: &str) -> CliResult<Self> {
        let model = |rel: &str| -> CliResult<FoundationModel> {
            Ok(FoundationModel::from_json(&read_checkpoint(
                &rd.path(rel),
            )?)?)
        };
        Ok(match name {
            "ar-f" => Forecaster::Recursive(model(names::ARF)?),
            "mt-f" => Forecaster::Direct(model(names::MTF)?),
            "mola" => {
                let f = load_foundation(rd, cfg)?;
                let ad = MolaAdapter::from_json(&read_checkpoint(&rd.path(names::ADAPTER))?)?;
                Forecaster::Mixture(f, ad)
            }
            other => return Err(CliError::user(format!("unknown paradigm '{other}'"))),
        })
    }

    fn predict(&self, x: &Mat, horizon: usize) -> mola_core::Result<Mat> {
        match self {
            Forecaster::Recursive(m) => m.ar_f_forecast(x, horizon),
            Forecaster::Direct(m) => m.forecast(x),
            Forecaster::Mixture(f, ad) => ad.forecast(f, x),
        }
    }

    fn check_horizon(&self, horizon: usize) -> CliResult<()> {
        let covers = match self {
            Forecaster::Recursive(_) => horizon,
            Forecaster::Direct(m) => m.head_out(),
            Forecaster::Mixture(_, ad) => ad.plan().horizon(),
        };
        if covers != horizon {
            return Err(CliError::user(format!(
                "checkpoint forecasts {covers} steps, the config horizon is {horizon}"
            )));
        }
        Ok(())
    }
}

/// Maps `x` (columns `window·D + channel`) through per-channel stats.
fn per_channel(x: &Mat, stats: &[ChannelStats], f: impl Fn(f64, &ChannelStats) -> f64) -> Mat {
    let d = stats.len();
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = f(*v, &stats[j % d]);
        }
    }
    out
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    paradigm: &'a str,
    split: &'static str,
    /// Scores on the standardized scale the model was trained on.
    metrics: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    original_units: Option<EvalReport>,
}

pub fn split_set(w: &SplitWindows, kind: SplitKind) -> &WindowSet {
    match kind {
        SplitKind::Train => &w.train,
        SplitKind::Val => &w.val,
        SplitKind::Test => &w.test,
    }
}

fn error_samples_for(fc: &Forecaster, set: &WindowSet, horizon: usize) -> CliResult<(Mat, Mat)> {
    Ok(error_samples(set, horizon, &|x| fc.predict(x, horizon))?)
}

/// Scores a trained paradigm on one split.
pub fn eval(
    cfg: &RunConfig,
    rd: &mut RunDir,
    paradigm: Option<&str>,
    split: SplitKind,
) -> CliResult<()> {
    let name = paradigm.unwrap_or(cfg.paradigm.name());
    let fc = Forecaster::load(rd, cfg, name)?;
    let t = cfg.dataset.horizon;
    fc.check_horizon(t)?;
    let (ds, w) = data(cfg)?;
    let set = split_set(&w, split);
    let (sq, ab) = error_samples_for(&fc, set, t)?;
    let metrics = report_from_samples(&sq, &ab, &cfg.horizons())?;

    let original_units = if cfg.output.destandardize {
        let stats = ds
            .norm_stats()
            .ok_or_else(|| CliError::user("output.destandardize needs dataset.standardize = true"))?
            .to_vec();
        let raw = ds.destandardize()?;
        let raw_set = WindowSet::new(&raw, cfg.dataset.lookback, t, split)?;
        let (sq, ab) = error_samples(&raw_set, t, &|x| {
            let z = per_channel(x, &stats, |v, s| (v - s.mean) / s.std);
            Ok(per_channel(&fc.predict(&z, t)?, &stats, |v, s| {
                v * s.std + s.mean
            }))
        })?;
        Some(report_from_samples(&sq, &ab, &cfg.horizons())?)
    } else {
        None
    };

    let out = EvalOutput {
        paradigm: name,
        split: split.name(),
        metrics,
        original_units,
    };
    let stem = format!("reports/eval.{name}.{}", split.name());
    if cfg.wants(Format::Json) {
        rd.write_json(&format!("{stem}.json"), "evaluation", &out)?;
    }
    if cfg.wants(Format::Csv) {
        let comment = rd.comment();
        rd.write_with(&format!("{stem}.per_step.csv"), |f| {
            write_comment(f, &comment)?;
            writeln!(f, "step,mse,mae")?;
            for (i, m) in out.metrics.per_step.iter().enumerate() {
                writeln!(f, "{},{:?},{:?}", i + 1, m.mse, m.mae)?;
            }
            Ok(())
        })?;
        rd.write_with(&format!("{stem}.horizons.csv"), |f| {
            write_comment(f, &comment)?;
            writeln!(f, "horizon,mse,mae")?;
            for h in &out.metrics.per_horizon {
                writeln!(f, "{},{:?},{:?}", h.horizon, h.mse, h.mae)?;
            }
            writeln!(
                f,
                "avg,{:?},{:?}",
                out.metrics.average.mse, out.metrics.average.mae
            )?;
            Ok(())
        })?;
    }
    println!(
        "{name} on {}: {} windows",
        split.name(),
        out.metrics.n_windows
    );
    for h in &out.metrics.per_horizon {
        println!(
            "  horizon {:>4}  mse {:.6}  mae {:.6}",
            h.horizon, h.mse, h.mae
        );
    }
    println!(
        "  average       mse {:.6}  mae {:.6}",
        out.metrics.average.mse, out.metrics.average.mae
    );
    Ok(())
}

fn write_comment(f: &mut impl Write, comment: &str) -> CliResult<()> {
    for line in comment.lines() {
        writeln!(f, "# {line}")?;
    }
    Ok(())
}

/// Rank bound of a trained multi-output head on the test windows.
pub fn analyze_bottleneck(
    cfg: &RunConfig,
    rd: &mut RunDir,
    checkpoint: Option<&Path>,
) -> CliResult<()> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| rd.path(names::MTF));
    let model = FoundationModel::from_json(&read_checkpoint(&path)?)?;
    let (_, w) = data(cfg)?;
    let rep = head_bottleneck(&model, &w.test)?;
    rd.write_json("reports/bottleneck.json", "bottleneck", &rep)?;
    println!(
        "bottleneck: head {}x{} (rank {} of [W b]), {} test windows",
        rep.horizon, rep.rep_dim, rep.rank, rep.n_windows
    );
    println!("  mean min_error_sq {:.6}", rep.mean_min_error_sq);
    println!(
        "  mean realized_sq  {:.6} ({} violations)",
        rep.mean_realized_sq, rep.violations
    );
    if rep.violations > 0 {
        return Err(CliError::Internal(format!(
            "{} windows beat the minimum attainable error",
            rep.violations
        )));
    }
    Ok(())
}

/// Dimensions for the adapter/backbone parameter count.
#[derive(Clone, Copy, Debug)]
pub struct ParamArgs {
    pub n_layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub rank: u64,
    pub experts: u64,
    pub segments: u64,
}

pub fn analyze_params(rd: &mut RunDir, a: ParamArgs) -> CliResult<()> {
    let c = param_counts(a.n_layers, a.d_model, a.d_ff, a.rank, a.experts, a.segments)?;
    rd.write_json("reports/params.json", "params", &c)?;
    println!("adapter parameters  {}", c.n_mola);
    println!("backbone parameters {}", c.n_backbone);
    println!("ratio {:.3} ({:.6})", c.ratio, c.ratio);
    Ok(())
}

#[derive(Serialize)]
struct VarianceOutput {
    reports: Vec<(String, VarianceReport)>,
    comparisons: Vec<mola_core::analysis::VarianceComparison>,
}

/// Variance decomposition of per-step test losses for every paradigm with
/// a checkpoint in the run directory.
pub fn analyze_variance(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let (_, w) = data(cfg)?;
    let t = cfg.dataset.horizon;
    let mut reports = Vec::new();
    for name in PARADIGMS {
        let present = match name {
            "mola" => rd.path(names::ADAPTER).exists() && rd.path(names::FOUNDATION).exists(),
            other => rd.path(baseline_checkpoint(other)).exists(),
        };
        if !present {
            continue;
        }
        let fc = Forecaster::load(rd, cfg, name)?;
        fc.check_horizon(t)?;
        let (sq, _) = error_samples_for(&fc, &w.test, t)?;
        reports.push((name.to_string(), variance_report(&sq)?));
    }
    if reports.len() < 2 {
        return Err(CliError::user(
            "variance analysis needs checkpoints for at least two paradigms; run train-baseline and/or pretrain + adapt first",
        ));
    }
    let mola = reports.iter().position(|(n, _)| n == "mola");
    let mut comparisons = Vec::new();
    match mola {
        Some(m) => {
            for (i, (name, r)) in reports.iter().enumerate() {
                if i != m {
                    comparisons.push(compare_variance(name, r, "mola", &reports[m].1)?);
                }
            }
        }
        None => comparisons.push(compare_variance(
            &reports[0].0,
            &reports[0].1,
            &reports[1].0,
            &reports[1].1,
        )?),
    }
    for (name, r) in &reports {
        println!(
            "{name}: var {:.6e} = terms {:.6e} + cov {:.6e} (gap {:.1e})",
            r.var_total,
            r.var_terms.iter().sum::<f64>() / (t * t) as f64,
            2.0 * r.cov_sum / (t * t) as f64,
            r.identity_gap
        );
    }
    for c in &comparisons {
        println!(
            "{} vs {}: dCov sum {:+.6e}, candidate lower variance: {}",
            c.baseline, c.candidate, c.delta_cov_sum, c.candidate_lower_variance
        );
    }
    let out = VarianceOutput {
        reports,
        comparisons,
    };
    if cfg.wants(Format::Json) {
        rd.write_json("reports/variance.json", "variance", &out)?;
    }
    if cfg.wants(Format::Csv) {
        let comment = rd.comment();
        rd.write_with("reports/variance.csv", |f| {
            write_comment(f, &comment)?;
            writeln!(
                f,
                "paradigm,samples,var_total,var_terms_sum,cov_sum,identity_gap"
            )?;
            for (n, r) in &out.reports {
                writeln!(
                    f,
                    "{n},{},{:?},{:?},{:?},{:?}",
                    r.samples(),
                    r.var_total,
                    r.var_terms.iter().sum::<f64>(),
                    r.cov_sum,
                    r.identity_gap
                )?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Trains one model per requested step and compares their encodings.
pub fn analyze_probe(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let (_, w) = data(cfg)?;
    let pc = ProbeConfig {
        steps: cfg.probe_steps(),
        encoder: cfg.encoder(),
        train: cfg.train.baseline(),
    };
    let rep = per_step_probe(&w, &pc)?;
    if cfg.wants(Format::Json) {
        rd.write_json("reports/probe.json", "probe", &rep)?;
    }
    if cfg.wants(Format::Csv) {
        let comment = rd.comment();
        for (i, run) in rep.runs.iter().enumerate() {
            let rel = format!("reports/probe/run{}.step{}.csv", i + 1, run.step);
            rd.write_with(&rel, |f| {
                Ok(write_points_csv(run, rep.channels, f, Some(&comment))?)
            })?;
        }
    }
    for p in &rep.pairs {
        println!(
            "step {:>3} vs {:>3}: disparity {:.4}",
            p.step_a, p.step_b, p.disparity
        );
    }
    println!(
        "mean cross-step disparity {:.4}, same-step baseline {:.4}, ratio {:.2}",
        rep.mean_pair_disparity, rep.baseline_disparity, rep.ratio
    );
    Ok(())
}

#[derive(Serialize)]
struct CompareOutput {
    summary: mola_core::analysis::SeedSummary,
    reports: Vec<mola_core::analysis::ComparisonReport>,
}

/// Trains all three paradigms per seed on identical windows.
pub fn compare(cfg: &RunConfig, rd: &mut RunDir) -> CliResult<()> {
    let (segments, experts, rank, layers) = mola_fields(cfg, "compare")?;
    let Paradigm::Mola { schedule, .. } = cfg.paradigm else {
        unreachable!("checked by mola_fields")
    };
    let (_, w) = data(cfg)?;
    let base = CompareConfig {
        encoder: cfg.encoder(),
        segments,
        experts,
        rank,
        layers,
        schedule,
        pretrain: cfg.train.pretraining(),
        baseline: cfg.train.baseline(),
        adapt: cfg.train.adaptation(),
        horizons: cfg.horizons(),
    };
    let seeds = cfg.seeds();
    let mut reports = Vec::new();
    for &s in &seeds {
        log::info!("comparing paradigms with seed {s}");
        reports.push(paradigm_compare(&w, &base.with_seed(s))?);
    }
    let summary = summarize(&seeds, &reports)?;
    println!(
        "{:<6} {:>7} {:>10} {:>10} {:>10} {:>10}",
        "model", "horizon", "mse", "mae", "vs ar-f", "vs mt-f"
    );
    let pct = |v: Option<f64>| v.map(|x| format!("{x:+.1}%")).unwrap_or_else(|| "-".into());
    for r in &summary.rows {
        println!(
            "{:<6} {:>7} {:>10.6} {:>10.6} {:>10} {:>10}",
            r.paradigm,
            r.horizon
                .map(|h| h.to_string())
                .unwrap_or_else(|| "avg".into()),
            r.mse.mean,
            r.mae.mean,
            pct(r.delta_mse_vs_arf),
            pct(r.delta_mse_vs_mtf)
        );
    }
    let out = CompareOutput { summary, reports };
    if cfg.wants(Format::Json) {
        rd.write_json("reports/compare.json", "comparison", &out)?;
    }
    if cfg.wants(Format::Csv) {
        let comment = rd.comment();
        rd.write_with("reports/compare.csv", |f| {
            Ok(out.summary.write_csv(f, Some(&comment))?)
        })?;
    }
    Ok(())
}
