//! End-to-end runs of the `mola` binary on small synthetic configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

/// Short horizon, short series and few epochs so each command is quick.
const SMALL: &str = r#"
[dataset]
lookback = 8
horizon = 8

[dataset.synth]
n_points = 900
d_channels = 2
noise_std = 0.1
seed = 0
components = [
  { kind = "sine", amplitude = 1.0, period = 24.0 },
  { kind = "ar1", amplitude = 0.3, ar_coeff = 0.7 },
]

[model]
kind = "mlp2"
hidden = [8, 2]

[paradigm]
kind = "mola"
segments = 2
experts = 2
rank = 2

[train]
max_epochs = 2
patience = 1
pretrain_max_epochs = 2
pretrain_patience = 1

[output]
horizons = [4, 8]
"#;

fn mola(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mola"))
        .current_dir(dir)
        .env_remove("MOLA_RUN_ROOT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn fails_with(out: &Output, code: i32, needle: &str) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "stderr:\n{stderr}");
    assert!(stderr.contains(needle), "expected '{needle}' in:\n{stderr}");
    stderr
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, config).unwrap();
    (dir, cfg)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn synth_writes_csv_and_manifest_that_regenerates_it() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    ok(&mola(
        d,
        &["--config", "small.toml", "--run-dir", "a", "synth"],
    ));
    let csv = fs::read_to_string(d.join("a/data/synth.csv")).unwrap();
    assert_eq!(data_lines(&csv).len(), 900 + 1);
    assert!(csv.starts_with("# mola "));

    // No config at all: generator settings come from the manifest alone.
    ok(&mola(
        d,
        &[
            "--run-dir",
            "b",
            "synth",
            "--from-manifest",
            "a/data/synth.manifest.json",
        ],
    ));
    let again = fs::read_to_string(d.join("b/data/synth.csv")).unwrap();
    assert_eq!(data_lines(&csv), data_lines(&again));
    let ma = json(&d.join("a/data/synth.manifest.json"));
    let mb = json(&d.join("b/data/synth.manifest.json"));
    assert_eq!(ma["synth"], mb["synth"]);
}

#[test]
fn invalid_synth_spec_is_a_user_error() {
    let (dir, _) = setup(&SMALL.replace("noise_std = 0.1", "noise_std = -1.0"));
    let out = mola(dir.path(), &["--config", "small.toml", "synth"]);
    fails_with(&out, 1, "noise_std");
}

#[test]
fn pretrain_then_adapt_writes_segment_records() {
    let cfg = SMALL
        .replace("horizon = 8", "horizon = 96")
        .replace("segments = 2", "segments = 4")
        .replace("horizons = [4, 8]", "horizons = [96]")
        .replace("n_points = 900", "n_points = 1500");
    let (dir, _) = setup(&cfg);
    let d = dir.path();
    ok(&mola(
        d,
        &["--config", "small.toml", "--run-dir", "r", "pretrain"],
    ));
    let f = json(&d.join("r/checkpoints/foundation.json"));
    assert_eq!(f["checkpoint"]["head_out"], 24);
    ok(&mola(
        d,
        &["--config", "small.toml", "--run-dir", "r", "adapt"],
    ));
    for k in 1..=4 {
        let rec = json(&d.join(format!("r/records/adapt.segment{k}.json")));
        assert_eq!(rec["segment"]["segment"], k);
    }
    assert!(!d.join("r/records/adapt.segment5.json").exists());
    assert!(d.join("r/checkpoints/adapter.json").exists());
    ok(&mola(
        d,
        &["--config", "small.toml", "--run-dir", "r", "eval"],
    ));

    let m = json(&d.join("r/manifest.json"));
    for cmd in ["pretrain", "adapt", "eval"] {
        assert!(
            m["commands"][cmd]["outputs"]
                .as_array()
                .is_some_and(|o| !o.is_empty()),
            "{cmd}"
        );
    }
}

#[test]
fn adapt_rejects_a_foundation_with_the_wrong_head() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    ok(&mola(
        d,
        &["--config", "small.toml", "--run-dir", "r", "pretrain"],
    ));
    let out = mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "--set",
            "paradigm.segments=4",
            "adapt",
        ],
    );
    let msg = fails_with(&out, 1, "head_out is 4");
    assert!(msg.contains("T/K = 8/4 = 2"), "{msg}");
}

#[test]
fn adapt_without_a_foundation_says_what_to_run() {
    let (dir, _) = setup(SMALL);
    let out = mola(dir.path(), &["--config", "small.toml", "adapt"]);
    fails_with(&out, 1, "run the training command");
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    for run in ["x", "y"] {
        ok(&mola(
            d,
            &[
                "--config",
                "small.toml",
                "--run-dir",
                run,
                "--seed",
                "7",
                "pretrain",
            ],
        ));
        ok(&mola(
            d,
            &[
                "--config",
                "small.toml",
                "--run-dir",
                run,
                "--seed",
                "7",
                "adapt",
            ],
        ));
    }
    for rel in [
        "records/pretrain.json",
        "records/adapt.json",
        "checkpoints/foundation.json",
        "checkpoints/adapter.json",
        "manifest.json",
    ] {
        let a = fs::read(d.join("x").join(rel)).unwrap();
        let b = fs::read(d.join("y").join(rel)).unwrap();
        assert!(a == b, "{rel} differs between reruns");
    }
    ok(&mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "z",
            "--seed",
            "8",
            "pretrain",
        ],
    ));
    assert_ne!(
        fs::read(d.join("x/records/pretrain.json")).unwrap(),
        fs::read(d.join("z/records/pretrain.json")).unwrap()
    );
}

#[test]
fn eval_is_consistent_with_training_and_its_own_tables() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    let run = ["--config", "small.toml", "--run-dir", "r"];
    ok(&mola(
        d,
        &[&run[..], &["train-baseline", "--paradigm", "mt-f"]].concat(),
    ));
    ok(&mola(
        d,
        &[&run[..], &["eval", "--paradigm", "mt-f", "--split", "val"]].concat(),
    ));

    let rec = json(&d.join("r/records/mt-f.json"));
    let best = rec["record"]["best_val_loss"].as_f64().unwrap();
    let ev = json(&d.join("r/reports/eval.mt-f.val.json"));
    let m = &ev["evaluation"]["metrics"];
    let full = m["per_horizon"][1]["mse"].as_f64().unwrap();
    assert!(full.is_finite());
    assert!(
        (full - best).abs() <= 1e-12 * best.max(1.0),
        "{full} vs {best}"
    );

    let per_step = fs::read_to_string(d.join("r/reports/eval.mt-f.val.per_step.csv")).unwrap();
    assert_eq!(data_lines(&per_step).len(), 1 + 8);
    let rows: Vec<Vec<String>> =
        data_lines(&fs::read_to_string(d.join("r/reports/eval.mt-f.val.horizons.csv")).unwrap())
            .iter()
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
    let mse = |r: &Vec<String>| r[1].parse::<f64>().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], "avg");
    assert!((mse(&rows[2]) - (mse(&rows[0]) + mse(&rows[1])) / 2.0).abs() <= 1e-12);
}

#[test]
fn eval_reports_original_units_on_request() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    ok(&mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "train-baseline",
            "--paradigm",
            "ar-f",
        ],
    ));
    ok(&mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "--set",
            "output.destandardize=true",
            "eval",
            "--paradigm",
            "ar-f",
        ],
    ));
    let ev = json(&d.join("r/reports/eval.ar-f.test.json"));
    let z = ev["evaluation"]["metrics"]["average"]["mse"]
        .as_f64()
        .unwrap();
    let raw = ev["evaluation"]["original_units"]["average"]["mse"]
        .as_f64()
        .unwrap();
    assert!(z.is_finite() && raw.is_finite() && raw != z);
}

#[test]
fn analyze_params_prints_the_reference_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&mola(dir.path(), &["--run-dir", "r", "analyze", "params"]));
    assert!(out.contains("ratio 0.047"), "{out}");
    assert!(out.contains("98352") || out.contains("196704"), "{out}");
}

#[test]
fn analyze_bottleneck_on_a_trained_multi_output_head() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    ok(&mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "train-baseline",
            "--paradigm",
            "mt-f",
        ],
    ));
    let out = ok(&mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "analyze",
            "bottleneck",
        ],
    ));
    assert!(out.contains("mean min_error_sq"), "{out}");
    let rep = json(&d.join("r/reports/bottleneck.json"));
    let b = &rep["bottleneck"];
    assert!(b["mean_min_error_sq"].as_f64().unwrap() >= 0.0);
    assert_eq!(b["violations"], 0);
    assert_eq!(rep["config"]["paradigm"]["kind"], "mola");
}

#[test]
fn variance_probe_and_compare_write_reports() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    let run = ["--config", "small.toml", "--run-dir", "r"];
    let missing = mola(d, &[&run[..], &["analyze", "variance"]].concat());
    fails_with(&missing, 1, "at least two paradigms");
    ok(&mola(
        d,
        &[&run[..], &["train-baseline", "--paradigm", "mt-f"]].concat(),
    ));
    ok(&mola(d, &[&run[..], &["pretrain"]].concat()));
    ok(&mola(d, &[&run[..], &["adapt"]].concat()));
    let out = ok(&mola(d, &[&run[..], &["analyze", "variance"]].concat()));
    assert!(out.contains("mt-f vs mola"), "{out}");
    let v = json(&d.join("r/reports/variance.json"));
    for r in v["variance"]["reports"].as_array().unwrap() {
        assert!(r[1]["identity_gap"].as_f64().unwrap() < 1e-12);
    }

    let out = ok(&mola(
        d,
        &[
            &run[..],
            &["--set", "analysis.probe_steps=[1, 8]", "analyze", "probe"],
        ]
        .concat(),
    ));
    assert!(out.contains("ratio"), "{out}");
    let pts = fs::read_to_string(d.join("r/reports/probe/run2.step8.csv")).unwrap();
    assert!(data_lines(&pts)[0].starts_with("window,channel,z0,z1"));

    let out = ok(&mola(
        d,
        &[&run[..], &["--set", "analysis.seeds=[0, 1]", "compare"]].concat(),
    ));
    assert!(out.contains("mola") && out.contains("avg"), "{out}");
    let c = json(&d.join("r/reports/compare.json"));
    assert_eq!(
        c["comparison"]["summary"]["seeds"],
        serde_json::json!([0, 1])
    );
    assert!(fs::read_to_string(d.join("r/reports/compare.csv"))
        .unwrap()
        .contains("delta_mse_vs_arf_pct"));
}

#[test]
fn every_output_carries_version_and_config_hash() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    ok(&mola(
        d,
        &["--config", "small.toml", "--run-dir", "r", "synth"],
    ));
    ok(&mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "train-baseline",
            "--paradigm",
            "mt-f",
        ],
    ));
    ok(&mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "eval",
            "--paradigm",
            "mt-f",
        ],
    ));
    let version = format!("mola {}", env!("CARGO_PKG_VERSION"));
    let hash = json(&d.join("r/records/mt-f.json"))["config_hash"]
        .as_str()
        .unwrap()
        .to_string();
    assert_eq!(hash.len(), 64);
    let mut seen = 0;
    let mut stack = vec![d.join("r")];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let text = fs::read_to_string(&path).unwrap();
            assert!(
                text.contains(&version),
                "{} lacks the version",
                path.display()
            );
            if !path.ends_with("manifest.json") {
                assert!(
                    text.contains(&hash),
                    "{} lacks the config hash",
                    path.display()
                );
            }
            seen += 1;
        }
    }
    assert!(seen >= 8, "only {seen} files");
}

#[test]
fn fail_if_exists_protects_earlier_outputs() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    ok(&mola(
        d,
        &["--config", "small.toml", "--run-dir", "r", "synth"],
    ));
    let out = mola(
        d,
        &[
            "--config",
            "small.toml",
            "--run-dir",
            "r",
            "--fail-if-exists",
            "synth",
        ],
    );
    fails_with(&out, 1, "--fail-if-exists");
    // Without the flag the rerun overwrites with a warning.
    let out = mola(d, &["--config", "small.toml", "--run-dir", "r", "synth"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("overwriting"));
}

#[test]
fn run_root_comes_from_the_environment() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_mola"))
        .current_dir(d)
        .env("MOLA_RUN_ROOT", d.join("root"))
        .args(["--config", "small.toml", "synth"])
        .output()
        .unwrap();
    ok(&out);
    assert!(d.join("root/small/data/synth.csv").exists());
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let (dir, _) = setup(SMALL);
    let d = dir.path();
    fails_with(&mola(d, &["analyze", "nonsense"]), 1, "nonsense");
    fails_with(&mola(d, &["frobnicate"]), 1, "frobnicate");
    fails_with(
        &mola(d, &["--config", "missing.toml", "synth"]),
        1,
        "missing.toml",
    );
    fails_with(
        &mola(
            d,
            &[
                "--config",
                "small.toml",
                "--set",
                "paradigm.segments=3",
                "pretrain",
            ],
        ),
        1,
        "not divisible",
    );
    fails_with(
        &mola(
            d,
            &[
                "--config",
                "small.toml",
                "--set",
                r#"paradigm={kind="mt-f"}"#,
                "pretrain",
            ],
        ),
        1,
        "needs `[paradigm] kind = \"mola\"`",
    );
    let help = mola(d, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-baseline"));
}
