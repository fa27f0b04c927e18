//! Optimization and evaluation: Adam, early stopping, pre-training, the
//! multi-output and recursive baselines, segment adaptation and metrics.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::MolaAdapter;
use crate::data::{SplitWindows, WindowSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{derive_seed, EncoderSpec, FoundationModel, GradStore, Metrics, ParamStore};

/// Seed-stream tags, mixed into the run seed with [`derive_seed`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const ADAPT_SHUFFLE: u64 = 4;
}

/// Windows per forward pass when evaluating.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per entry name.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&Mat, &Mat)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// One update of every trainable entry that has a gradient. Gradients
    /// for frozen entries are ignored.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            if !params.is_trainable(name)? {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("'{name}' is {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Univariate series per minibatch. The encoder is channel-independent,
    /// so each (window, channel) pair is one training sample.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Baselines and adaptation: 10 epochs, patience 3.
    pub fn baseline(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed,
            adam: AdamConfig::default(),
        }
    }

    /// Pre-training: 5 epochs, patience 2.
    pub fn pretraining(seed: u64) -> Self {
        TrainConfig {
            max_epochs: 5,
            patience: 2,
            ..Self::baseline(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.adam;
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.batch_size >= 1
            && self.max_epochs >= 1
            && self.patience >= 1
            && a.beta1 > 0.0
            && a.beta1 < 1.0
            && a.beta2 > 0.0
            && a.beta2 < 1.0
            && a.eps > 0.0;
        if !ok {
            return Err(Error::invalid("train config", format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `patience` consecutive epochs without a strictly lower validation loss.
    EarlyStopped,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

/// Tracks the best validation loss; ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    bad: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            bad: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        self.seen += 1;
        let better = match self.best {
            None => !val_loss.is_nan(),
            Some((_, b)) => val_loss < b,
        };
        if better {
            self.best = Some((self.seen, val_loss));
            self.bad = 0;
            Verdict::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Wait
            }
        }
    }

    /// 1-based epoch and loss of the best observation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    /// Validation loss before the first update.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// Kept out of serialized records so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
}

/// Windows of a shuffled epoch, in batch order.
pub fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// What the training loop needs from a model.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Loss and gradients on training windows `idx`.
    fn batch(&self, idx: &[usize]) -> Result<(f64, GradStore)>;
    /// Validation loss used for model selection.
    fn val_loss(&self) -> Result<f64>;
}

/// Minibatch Adam with best-validation snapshotting and early stopping.
/// The parameters are left at the best epoch.
pub fn fit(
    obj: &mut dyn Objective,
    cfg: &TrainConfig,
    n_train: usize,
    shuffle_seed: u64,
    stage: &str,
) -> Result<RunRecord> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::EmptyBatch);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut adam = Adam::new(cfg.adam);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let initial_val_loss = obj.val_loss()?;
    let mut snapshot: Option<ParamStore> = None;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        for idx in shuffled_batches(&mut rng, n_train, cfg.batch_size) {
            let (loss, grads) = obj.batch(&idx)?;
            if !loss.is_finite() {
                return Err(Error::invalid(
                    "training",
                    format!("{stage}: non-finite loss in epoch {epoch}"),
                ));
            }
            adam.step(obj.params_mut(), &grads, cfg.learning_rate)?;
            total += loss * idx.len() as f64;
        }
        let val_loss = obj.val_loss()?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / n_train as f64,
            val_loss,
        });
        log::debug!("{stage} epoch {epoch}: val {val_loss:.6}");
        match stopper.observe(val_loss) {
            Verdict::Improved => snapshot = Some(obj.params().clone()),
            Verdict::Wait => {}
            Verdict::Stop => {
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss) = stopper
        .best()
        .ok_or_else(|| Error::invalid("training", format!("{stage}: validation loss is NaN")))?;
    if let Some(s) = snapshot {
        *obj.params_mut() = s;
    }
    Ok(RunRecord {
        stage: stage.to_string(),
        initial_val_loss,
        epochs,
        best_epoch,
        best_val_loss,
        stop_reason,
        wall_time_secs: start.elapsed().as_secs_f64(),
        test: None,
    })
}

/// Mean squared error of `predict` against label rows `steps` over a
/// window set, evaluated in chunks.
pub fn set_mse(
    set: &WindowSet,
    steps: Range<usize>,
    predict: &dyn Fn(&Mat) -> Result<Mat>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let pred = predict(&set.inputs(chunk))?;
        let y = set.labels(chunk, steps.clone())?;
        sum += pred.sub(&y)?.frobenius_sq();
        count += y.rows() * y.cols();
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(sum / count as f64)
}

struct ModelObjective<'a> {
    model: FoundationModel,
    windows: &'a SplitWindows,
    steps: Range<usize>,
}

impl Objective for ModelObjective<'_> {
    fn params(&self) -> &ParamStore {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn batch(&self, idx: &[usize]) -> Result<(f64, GradStore)> {
        let x = self.windows.train.series_inputs(idx);
        let y = self.windows.train.series_labels(idx, self.steps.clone())?;
        self.model.loss_and_grads_xy(&x, &y)
    }

    fn val_loss(&self) -> Result<f64> {
        set_mse(&self.windows.val, self.steps.clone(), &|x| {
            self.model.forecast(x)
        })
    }
}

/// Trains an encoder with an `S`-step head on the first `S` label steps.
/// The returned model is frozen at its best validation epoch.
pub fn pretrain(
    windows: &SplitWindows,
    encoder: &EncoderSpec,
    head_out: usize,
    cfg: &TrainConfig,
) -> Result<(FoundationModel, RunRecord)> {
    train_direct(windows, encoder, head_out, cfg, "pretrain")
}

/// Multi-output baseline: one head over the full horizon.
pub fn mtf_train(
    windows: &SplitWindows,
    encoder: &EncoderSpec,
    cfg: &TrainConfig,
) -> Result<(FoundationModel, RunRecord)> {
    train_direct(windows, encoder, windows.horizon(), cfg, "mtf")
}

/// Recursive baseline: a one-step model, applied with
/// [`FoundationModel::ar_f_forecast`].
pub fn arf_train(
    windows: &SplitWindows,
    encoder: &EncoderSpec,
    cfg: &TrainConfig,
) -> Result<(FoundationModel, RunRecord)> {
    train_direct(windows, encoder, 1, cfg, "arf")
}

fn train_direct(
    windows: &SplitWindows,
    encoder: &EncoderSpec,
    head_out: usize,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<(FoundationModel, RunRecord)> {
    train_steps(windows, encoder, 0..head_out, cfg, stage)
}

/// Trains a fresh model whose head predicts label rows `steps` (0-based).
/// The returned model is frozen at its best validation epoch.
pub fn train_steps(
    windows: &SplitWindows,
    encoder: &EncoderSpec,
    steps: Range<usize>,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<(FoundationModel, RunRecord)> {
    let head_out = steps.len();
    if encoder.in_len != windows.lookback() {
        return Err(Error::shape(
            "train",
            format!(
                "{stage}: encoder lookback {} vs window lookback {}",
                encoder.in_len,
                windows.lookback()
            ),
        ));
    }
    if head_out == 0 || steps.end > windows.horizon() {
        return Err(Error::invalid(
            "head",
            format!(
                "label steps {steps:?} with {}-step windows",
                windows.horizon()
            ),
        ));
    }
    let model = FoundationModel::new(
        encoder.clone(),
        head_out,
        derive_seed(cfg.seed, &[stream::INIT]),
    )?;
    let mut obj = ModelObjective {
        model,
        windows,
        steps,
    };
    let rec = fit(
        &mut obj,
        cfg,
        windows.train.series_count(),
        derive_seed(cfg.seed, &[stream::SHUFFLE]),
        stage,
    )?;
    let mut model = obj.model;
    model.freeze();
    Ok((model, rec))
}

/// Order in which adaptation visits the segments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptSchedule {
    /// Every minibatch loss is the mean over all segments; one optimizer
    /// for experts and logits; all logits are frozen at the end.
    #[default]
    Joint,
    /// Segments trained one after another in ascending order, each with a
    /// fresh optimizer; segment `k`'s logits freeze when its loop ends.
    Sequential,
}

struct AdapterObjective<'a> {
    foundation: &'a FoundationModel,
    adapter: MolaAdapter,
    windows: &'a SplitWindows,
    segments: Vec<usize>,
}

impl AdapterObjective<'_> {
    fn segment_val(&self, k: usize) -> Result<f64> {
        let plan = self.adapter.plan();
        let view = self.adapter.view(self.foundation, k)?;
        set_mse(&self.windows.val, plan.steps(k), &|x| view.forecast(x))
    }
}

impl Objective for AdapterObjective<'_> {
    fn params(&self) -> &ParamStore {
        self.adapter.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.adapter.params_mut()
    }

    fn batch(&self, idx: &[usize]) -> Result<(f64, GradStore)> {
        let x = self.windows.train.series_inputs(idx);
        let plan = self.adapter.plan();
        let weight = 1.0 / self.segments.len() as f64;
        let mut grads = GradStore::new();
        let mut loss = 0.0;
        for &k in &self.segments {
            let y = self.windows.train.series_labels(idx, plan.steps(k))?;
            let l = self.adapter.accumulate_segment_grads(
                self.foundation,
                k,
                &x,
                &y,
                weight,
                &mut grads,
            )?;
            loss += weight * l;
        }
        Ok((loss, grads))
    }

    fn val_loss(&self) -> Result<f64> {
        let weight = 1.0 / self.segments.len() as f64;
        let mut total = 0.0;
        for &k in &self.segments {
            total += weight * self.segment_val(k)?;
        }
        Ok(total)
    }
}

/// Result of adapting every segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub schedule: AdaptSchedule,
    /// One record per optimization run: a single joint run, or one per
    /// segment for the sequential schedule.
    pub runs: Vec<RunRecord>,
    /// Validation loss of each segment before and after adaptation.
    pub segment_val: Vec<SegmentVal>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentVal {
    pub segment: usize,
    pub initial: f64,
    pub best: f64,
}

/// Trains the adapter on every segment of its plan, then freezes all
/// segment logits. The foundation is only read.
pub fn adapt_all_segments(
    foundation: &FoundationModel,
    adapter: MolaAdapter,
    windows: &SplitWindows,
    cfg: &TrainConfig,
    schedule: AdaptSchedule,
) -> Result<(MolaAdapter, AdaptOutcome)> {
    let plan = adapter.plan();
    if !foundation.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if plan.seg_len() != foundation.head_out() {
        return Err(Error::PlanHeadMismatch {
            expected: plan.seg_len(),
            actual: foundation.head_out(),
        });
    }
    if plan.horizon() > windows.horizon() {
        return Err(Error::invalid(
            "adaptation",
            format!(
                "plan horizon {} exceeds window horizon {}",
                plan.horizon(),
                windows.horizon()
            ),
        ));
    }
    let k_total = plan.segments();
    let mut obj = AdapterObjective {
        foundation,
        adapter,
        windows,
        segments: (0..k_total).collect(),
    };
    let initial: Vec<f64> = (0..k_total)
        .map(|k| obj.segment_val(k))
        .collect::<Result<_>>()?;
    let mut runs = Vec::new();
    match schedule {
        AdaptSchedule::Joint => {
            let seed = derive_seed(cfg.seed, &[stream::ADAPT_SHUFFLE]);
            runs.push(fit(
                &mut obj,
                cfg,
                windows.train.series_count(),
                seed,
                "adapt",
            )?);
            for k in 0..k_total {
                obj.adapter.freeze_segment(k)?;
            }
        }
        AdaptSchedule::Sequential => {
            for k in 0..k_total {
                obj.segments = vec![k];
                let seed = derive_seed(cfg.seed, &[stream::ADAPT_SHUFFLE, k as u64 + 1]);
                let stage = format!("adapt.segment{}", k + 1);
                runs.push(fit(
                    &mut obj,
                    cfg,
                    windows.train.series_count(),
                    seed,
                    &stage,
                )?);
                obj.adapter.freeze_segment(k)?;
            }
        }
    }
    let best: Vec<f64> = (0..k_total)
        .map(|k| obj.segment_val(k))
        .collect::<Result<_>>()?;
    let segment_val = (0..k_total)
        .map(|k| SegmentVal {
            segment: k + 1,
            initial: initial[k],
            best: best[k],
        })
        .collect();
    Ok((
        obj.adapter,
        AdaptOutcome {
            schedule,
            runs,
            segment_val,
        },
    ))
}

/// Full-horizon forecast: each segment's adapted view fills its own rows.
pub fn mola_forecast(
    foundation: &FoundationModel,
    adapter: &MolaAdapter,
    history: &Mat,
) -> Result<Mat> {
    adapter.forecast(foundation, history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Test metrics: per step, over prefix horizons, and averaged over the
/// horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_windows: usize,
    pub per_step: Vec<Metrics>,
    pub per_horizon: Vec<HorizonMetrics>,
    pub average: Metrics,
}

/// Squared and absolute errors per window and step, each averaged over
/// channels: two `n_windows × T` matrices.
pub fn error_samples(
    set: &WindowSet,
    horizon: usize,
    predict: &dyn Fn(&Mat) -> Result<Mat>,
) -> Result<(Mat, Mat)> {
    let d = set.channels();
    let n = set.len();
    let mut sq = Mat::zeros(n, horizon);
    let mut ab = Mat::zeros(n, horizon);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let pred = predict(&set.inputs(chunk))?;
        let y = set.labels(chunk, 0..horizon)?;
        if pred.shape() != y.shape() {
            return Err(Error::shape(
                "evaluate",
                format!("forecast {:?}, labels {:?}", pred.shape(), y.shape()),
            ));
        }
        for (b, &w) in chunk.iter().enumerate() {
            for t in 0..horizon {
                let mut s = 0.0;
                let mut a = 0.0;
                for c in 0..d {
                    let e = pred[(t, b * d + c)] - y[(t, b * d + c)];
                    s += e * e;
                    a += e.abs();
                }
                sq[(w, t)] = s / d as f64;
                ab[(w, t)] = a / d as f64;
            }
        }
    }
    Ok((sq, ab))
}

/// Evaluates `predict` on every window of `set` for the full horizon.
/// `horizons` are prefix lengths for the per-horizon rows.
pub fn evaluate(
    set: &WindowSet,
    horizon: usize,
    horizons: &[usize],
    predict: &dyn Fn(&Mat) -> Result<Mat>,
) -> Result<EvalReport> {
    let (sq, ab) = error_samples(set, horizon, predict)?;
    report_from_samples(&sq, &ab, horizons)
}

pub fn report_from_samples(sq: &Mat, ab: &Mat, horizons: &[usize]) -> Result<EvalReport> {
    let (n, horizon) = sq.shape();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if horizons.is_empty() || horizons.iter().any(|&h| h == 0 || h > horizon) {
        return Err(Error::invalid(
            "evaluation horizons",
            format!("{horizons:?} for a {horizon}-step forecast"),
        ));
    }
    let col_mean = |m: &Mat, t: usize| (0..n).map(|i| m[(i, t)]).sum::<f64>() / n as f64;
    let per_step: Vec<Metrics> = (0..horizon)
        .map(|t| Metrics {
            mse: col_mean(sq, t),
            mae: col_mean(ab, t),
        })
        .collect();
    let per_horizon: Vec<HorizonMetrics> = horizons
        .iter()
        .map(|&h| HorizonMetrics {
            horizon: h,
            mse: per_step[..h].iter().map(|m| m.mse).sum::<f64>() / h as f64,
            mae: per_step[..h].iter().map(|m| m.mae).sum::<f64>() / h as f64,
        })
        .collect();
    let k = per_horizon.len() as f64;
    let average = Metrics {
        mse: per_horizon.iter().map(|h| h.mse).sum::<f64>() / k,
        mae: per_horizon.iter().map(|h| h.mae).sum::<f64>() / k,
    };
    Ok(EvalReport {
        n_windows: n,
        per_step,
        per_horizon,
        average,
    })
}

#[cfg(test)]
mod tests;
