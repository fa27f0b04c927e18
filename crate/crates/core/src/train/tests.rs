use super::*;
use crate::adapt::{make_segment_plan, MolaAdapter};
use crate::data::{Component, SeriesDataset, Split, SplitSpec, SynthSpec};
use crate::model::{Activation, EncoderSpec};

fn store_with(name: &str, m: Mat, trainable: bool) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(name, m, trainable).unwrap();
    s
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let w = Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    let mut s = store_with("w", w.clone(), true);
    let mut adam = Adam::new(AdamConfig::default());
    let mut g = GradStore::new();
    g.insert("w".into(), Mat::zeros(1, 3));
    for _ in 0..3 {
        adam.step(&mut s, &g, 1e-2).unwrap();
    }
    assert_eq!(s.get("w").unwrap(), &w);
    let (m, v) = adam.moments("w").unwrap();
    assert!(m.data().iter().chain(v.data()).all(|&x| x == 0.0));
}

#[test]
fn adam_first_step_closed_form() {
    let w = Mat::from_vec(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let g = Mat::from_vec(1, 4, vec![0.3, -2e-3, 7.0, 1e-9]).unwrap();
    let mut s = store_with("w", w.clone(), true);
    let mut grads = GradStore::new();
    grads.insert("w".into(), g.clone());
    let lr = 0.01;
    Adam::new(AdamConfig::default())
        .step(&mut s, &grads, lr)
        .unwrap();
    for i in 0..4 {
        let gi = g[(0, i)];
        let want = w[(0, i)] - lr * gi / (gi.abs() + 1e-8);
        assert!((s.get("w").unwrap()[(0, i)] - want).abs() < 1e-15);
    }
}

#[test]
fn adam_skips_frozen_entries() {
    let w = Mat::filled(2, 2, 1.0);
    let mut s = store_with("w", w.clone(), false);
    let mut g = GradStore::new();
    g.insert("w".into(), Mat::filled(2, 2, 5.0));
    Adam::new(AdamConfig::default())
        .step(&mut s, &g, 0.1)
        .unwrap();
    assert_eq!(s.get("w").unwrap(), &w);
}

#[test]
fn config_defaults_and_validation() {
    let p = TrainConfig::pretraining(0);
    assert_eq!((p.max_epochs, p.patience, p.batch_size), (5, 2, 32));
    let b = TrainConfig::baseline(0);
    assert_eq!((b.max_epochs, b.patience), (10, 3));
    assert_eq!(b.learning_rate, 1e-3);
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..b
        },
        TrainConfig { patience: 0, ..b },
        TrainConfig { batch_size: 0, ..b },
        TrainConfig {
            adam: AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            },
            ..b
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn run_trace(trace: &[f64], patience: usize) -> (usize, Option<(usize, f64)>) {
    let mut s = EarlyStopper::new(patience);
    for (i, &v) in trace.iter().enumerate() {
        if s.observe(v) == Verdict::Stop {
            return (i + 1, s.best());
        }
    }
    (trace.len(), s.best())
}

#[test]
fn early_stopping_on_constructed_traces() {
    assert_eq!(
        run_trace(&[1.0, 0.9, 0.95, 0.96, 0.97, 0.5], 3),
        (5, Some((2, 0.9)))
    );
    assert_eq!(
        run_trace(&[1.0, 0.9, 0.95, 0.96, 0.97, 0.5], 2),
        (4, Some((2, 0.9)))
    );
    // Ties are not improvements and keep the earliest epoch.
    assert_eq!(run_trace(&[1.0, 1.0, 1.0], 2), (3, Some((1, 1.0))));
    // A late improvement resets the counter.
    assert_eq!(
        run_trace(&[3.0, 3.1, 2.0, 2.1, 2.2], 2),
        (5, Some((3, 2.0)))
    );
    assert_eq!(run_trace(&[3.0, 2.0, 1.0], 1), (3, Some((3, 1.0))));
}

/// Scripted objective: one scalar parameter; validation losses come from a
/// fixed trace.
struct Scripted {
    store: ParamStore,
    trace: Vec<f64>,
    calls: std::cell::Cell<usize>,
}

impl Objective for Scripted {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn batch(&self, _idx: &[usize]) -> Result<(f64, GradStore)> {
        let mut g = GradStore::new();
        g.insert("w".into(), Mat::filled(1, 1, 1.0));
        Ok((1.0, g))
    }
    fn val_loss(&self) -> Result<f64> {
        let i = self.calls.get();
        self.calls.set(i + 1);
        Ok(self.trace[i])
    }
}

#[test]
fn fit_stops_and_restores_best_epoch() {
    // First entry is the pre-training validation.
    let mut obj = Scripted {
        store: store_with("w", Mat::zeros(1, 1), true),
        trace: vec![9.0, 5.0, 4.0, 4.5, 4.0, 4.2, 0.1],
        calls: std::cell::Cell::new(0),
    };
    let cfg = TrainConfig {
        patience: 3,
        batch_size: 4,
        ..TrainConfig::baseline(0)
    };
    let rec = fit(&mut obj, &cfg, 8, 0, "scripted").unwrap();
    assert_eq!(rec.epochs.len(), 5);
    assert_eq!(rec.stop_reason, StopReason::EarlyStopped);
    assert_eq!((rec.best_epoch, rec.best_val_loss), (2, 4.0));
    assert_eq!(rec.initial_val_loss, 9.0);
    // Two batches per epoch, each moving w by −lr; restored to epoch 2.
    let w = obj.store.get("w").unwrap()[(0, 0)];
    assert!((w + 4.0 * cfg.learning_rate).abs() < 1e-9, "{w}");

    let mut obj = Scripted {
        store: store_with("w", Mat::zeros(1, 1), true),
        trace: vec![9.0, 5.0, 4.0, 3.0],
        calls: std::cell::Cell::new(0),
    };
    let cfg = TrainConfig {
        max_epochs: 3,
        ..cfg
    };
    let rec = fit(&mut obj, &cfg, 8, 0, "scripted").unwrap();
    assert_eq!(rec.stop_reason, StopReason::MaxEpochs);
    assert_eq!(rec.best_epoch, 3);
}

#[test]
fn batches_cover_every_window_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = shuffled_batches(&mut rng, 70, 32);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6]);
    let mut all: Vec<usize> = b.concat();
    all.sort();
    assert_eq!(all, (0..70).collect::<Vec<_>>());
    let again = shuffled_batches(&mut ChaCha8Rng::seed_from_u64(3), 70, 32);
    assert_eq!(b, again);
    let next = shuffled_batches(&mut rng, 70, 32);
    assert_ne!(b, next);
}

fn sine_windows(l: usize, t: usize, noise: f64) -> SplitWindows {
    let spec = SynthSpec {
        n_points: 600,
        d_channels: 2,
        components: vec![Component::Sine {
            amplitude: 1.0,
            period: 24.0,
            phase: 0.0,
        }],
        noise_std: noise,
        seed: 4,
        split: SplitSpec::default(),
    };
    let ds = spec.generate().unwrap().standardize().unwrap();
    SplitWindows::new(&ds, l, t).unwrap()
}

#[test]
fn constant_target_is_learned() {
    let n = 300;
    let values = Mat::filled(n, 1, 0.5);
    let ds = SeriesDataset::new(
        values,
        vec!["c".into()],
        Split {
            train_end: 200,
            val_end: 250,
            test_end: 300,
        },
    )
    .unwrap();
    let w = SplitWindows::new(&ds, 4, 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 20,
        ..TrainConfig::pretraining(1)
    };
    let (m, rec) = pretrain(&w, &EncoderSpec::linear(4), 2, &cfg).unwrap();
    assert!(m.is_frozen());
    assert!(rec.best_val_loss < 1e-3, "{:?}", rec.epochs);
    assert!(rec.best_val_loss < rec.initial_val_loss);
}

#[test]
fn pretraining_is_deterministic() {
    let w = sine_windows(8, 4, 0.1);
    let spec = EncoderSpec::mlp2(8, 6, 2, Activation::Relu);
    let cfg = TrainConfig::pretraining(5);
    let (a, ra) = pretrain(&w, &spec, 2, &cfg).unwrap();
    let (b, rb) = pretrain(&w, &spec, 2, &cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(
        serde_json::to_string(&ra).unwrap(),
        serde_json::to_string(&rb).unwrap()
    );
    assert!(ra.epochs.len() <= 5);
    let (c, _) = pretrain(&w, &spec, 2, &TrainConfig::pretraining(6)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn multi_output_fits_noiseless_sine() {
    let w = sine_windows(8, 4, 0.0);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 30,
        patience: 5,
        ..TrainConfig::baseline(2)
    };
    let (m, rec) = mtf_train(&w, &EncoderSpec::linear(8), &cfg).unwrap();
    assert_eq!(m.head_out(), 4);
    assert!(rec.best_val_loss < 1e-3, "{}", rec.best_val_loss);
}

#[test]
fn one_step_multi_output_equals_one_step_pretraining() {
    let w = sine_windows(8, 1, 0.1);
    let spec = EncoderSpec::linear(8);
    let cfg = TrainConfig::baseline(3);
    let (a, _) = mtf_train(&w, &spec, &cfg).unwrap();
    let (b, _) = pretrain(&w, &spec, 1, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lookback_mismatch_is_rejected() {
    let w = sine_windows(8, 4, 0.1);
    assert!(pretrain(&w, &EncoderSpec::linear(6), 2, &TrainConfig::pretraining(0)).is_err());
    assert!(pretrain(&w, &EncoderSpec::linear(8), 5, &TrainConfig::pretraining(0)).is_err());
}

fn foundation_and_windows() -> (FoundationModel, RunRecord, SplitWindows) {
    let w = sine_windows(8, 6, 0.1);
    let spec = EncoderSpec::mlp2(8, 6, 3, Activation::Relu);
    let (f, rec) = pretrain(&w, &spec, 2, &TrainConfig::pretraining(7)).unwrap();
    (f, rec, w)
}

#[test]
fn zero_init_adaptation_starts_from_foundation_loss() {
    let (f, rec, w) = foundation_and_windows();
    let snapshot = f.to_json().unwrap();
    let plan = make_segment_plan(6, 3).unwrap();
    for schedule in [AdaptSchedule::Joint, AdaptSchedule::Sequential] {
        let ad = MolaAdapter::new(&f, plan, 2, 2, None, 1).unwrap();
        let (ad, out) =
            adapt_all_segments(&f, ad, &w, &TrainConfig::baseline(1), schedule).unwrap();
        assert_eq!(out.segment_val[0].initial, rec.best_val_loss);
        if schedule == AdaptSchedule::Sequential {
            assert_eq!(out.runs.len(), 3);
            assert_eq!(out.runs[0].initial_val_loss, rec.best_val_loss);
        } else {
            assert_eq!(out.runs.len(), 1);
        }
        for k in 0..3 {
            assert!(ad.segment_frozen(k).unwrap());
        }
        assert_eq!(f.to_json().unwrap(), snapshot);
    }
}

#[test]
fn single_segment_forecast_is_the_adapted_view() {
    let w = sine_windows(8, 2, 0.1);
    let spec = EncoderSpec::linear(8);
    let (f, _) = pretrain(&w, &spec, 2, &TrainConfig::pretraining(0)).unwrap();
    let plan = make_segment_plan(2, 1).unwrap();
    let ad = MolaAdapter::new(&f, plan, 3, 2, None, 0).unwrap();
    let (ad, out) =
        adapt_all_segments(&f, ad, &w, &TrainConfig::baseline(0), AdaptSchedule::Joint).unwrap();
    assert!(out.segment_val[0].best < out.segment_val[0].initial);
    let x = w.test.inputs(&[0, 5, 9]);
    assert_eq!(
        mola_forecast(&f, &ad, &x).unwrap(),
        ad.view(&f, 0).unwrap().forecast(&x).unwrap()
    );
}

#[test]
fn adaptation_rejects_mismatched_plan() {
    let (f, _, w) = foundation_and_windows();
    let other = FoundationModel::new(f.encoder().clone(), 3, 0).map(|mut m| {
        m.freeze();
        m
    });
    let ad = MolaAdapter::new(
        &other.unwrap(),
        make_segment_plan(6, 2).unwrap(),
        2,
        2,
        None,
        0,
    )
    .unwrap();
    assert!(matches!(
        adapt_all_segments(&f, ad, &w, &TrainConfig::baseline(0), AdaptSchedule::Joint),
        Err(Error::PlanHeadMismatch {
            expected: 3,
            actual: 2
        })
    ));
}

#[test]
fn evaluation_rows_and_averages() {
    let (f, _, w) = foundation_and_windows();
    let plan = make_segment_plan(6, 3).unwrap();
    let ad = MolaAdapter::new(&f, plan, 2, 2, None, 1).unwrap();
    let predict = |x: &Mat| ad.forecast(&f, x);
    let rep = evaluate(&w.test, 6, &[2, 4, 6], &predict).unwrap();
    assert_eq!(rep.per_step.len(), 6);
    assert_eq!(rep.n_windows, w.test.len());
    let mean = rep.per_horizon.iter().map(|h| h.mse).sum::<f64>() / 3.0;
    assert!((rep.average.mse - mean).abs() < 1e-12);
    let overall = set_mse(&w.test, 0..6, &predict).unwrap();
    assert!((rep.per_horizon[2].mse - overall).abs() < 1e-12);
    // Zero-init adapter repeats the foundation's two steps in every segment.
    let base = set_mse(&w.test, 0..2, &|x| f.forecast(x)).unwrap();
    assert!((rep.per_horizon[0].mse - base).abs() < 1e-12);
    assert!(evaluate(&w.test, 6, &[7], &predict).is_err());
    assert!(evaluate(&w.test, 6, &[], &predict).is_err());
}
