//! Mixture-of-LoRA adaptation of a frozen foundation model.
//!
//! The horizon is cut into `K` equal segments. Every adapted encoder layer
//! owns `P` low-rank experts `(B_p, A_p)` shared by all segments, and each
//! segment mixes them with its own softmax weights:
//! `M_k = M + Σ_p δ_k[p] · B_p A_p`.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{
    bias_name, derive_seed, mse_and_grad, weight_name, FoundationModel, GradStore, ParamStore,
    Weights, HEAD,
};

pub const CHECKPOINT_FORMAT: &str = "mola-adapter";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Logit value used to switch an expert off in a one-hot mixture. Its
/// softmax weight underflows to exactly zero.
pub const OFF_LOGIT: f64 = -1e6;

/// Equal-length contiguous segments of a forecast horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct SegmentPlan {
    horizon: usize,
    segments: usize,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    horizon: usize,
    segments: usize,
    seg_len: usize,
}

impl TryFrom<PlanRepr> for SegmentPlan {
    type Error = Error;

    fn try_from(r: PlanRepr) -> Result<Self> {
        let plan = SegmentPlan::new(r.horizon, r.segments)?;
        if plan.seg_len() != r.seg_len {
            return Err(Error::Checkpoint(format!(
                "segment length {} inconsistent with {}/{}",
                r.seg_len, r.horizon, r.segments
            )));
        }
        Ok(plan)
    }
}

impl From<SegmentPlan> for PlanRepr {
    fn from(p: SegmentPlan) -> Self {
        PlanRepr {
            horizon: p.horizon,
            segments: p.segments,
            seg_len: p.seg_len(),
        }
    }
}

impl SegmentPlan {
    pub fn new(horizon: usize, segments: usize) -> Result<Self> {
        if segments == 0 || horizon < segments {
            return Err(Error::invalid(
                "segment plan",
                format!("need 1 ≤ K ≤ T, got K={segments}, T={horizon}"),
            ));
        }
        if !horizon.is_multiple_of(segments) {
            return Err(Error::Indivisible { horizon, segments });
        }
        Ok(SegmentPlan { horizon, segments })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn seg_len(&self) -> usize {
        self.horizon / self.segments
    }

    /// 1-based inclusive step ranges `(start, end)`.
    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        let s = self.seg_len();
        (0..self.segments)
            .map(|k| (k * s + 1, (k + 1) * s))
            .collect()
    }

    /// 0-based label rows of segment `k`.
    pub fn steps(&self, k: usize) -> Range<usize> {
        let s = self.seg_len();
        k * s..(k + 1) * s
    }
}

pub fn make_segment_plan(horizon: usize, segments: usize) -> Result<SegmentPlan> {
    SegmentPlan::new(horizon, segments)
}

/// Softmax of `logits`, shifted by the maximum for stability.
pub fn normalize_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("mixture logits", format!("{logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// One low-rank pair; the update it contributes is `b · a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert {
    /// d_out × r
    pub b: Mat,
    /// r × d_in
    pub a: Mat,
}

impl LoraExpert {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// `base + Σ_p delta[p] · B_p A_p`.
pub fn effective_weight(base: &Mat, experts: &[LoraExpert], delta: &[f64]) -> Result<Mat> {
    let pairs: Vec<(&Mat, &Mat)> = experts.iter().map(|e| (&e.b, &e.a)).collect();
    mix(base, &pairs, delta)
}

fn mix(base: &Mat, experts: &[(&Mat, &Mat)], delta: &[f64]) -> Result<Mat> {
    if experts.len() != delta.len() {
        return Err(Error::shape(
            "effective_weight",
            format!("{} experts, {} weights", experts.len(), delta.len()),
        ));
    }
    let mut out = base.clone();
    for (&(b, a), &d) in experts.iter().zip(delta) {
        out.axpy(d, &b.matmul(a)?)?;
    }
    Ok(out)
}

/// Encoder layers adapted by default: every encoder weight matrix. The head
/// and all biases are refused.
pub fn adapter_placement(
    foundation: &FoundationModel,
    requested: Option<&[String]>,
) -> Result<Vec<String>> {
    let layers = foundation.encoder().layer_names();
    let Some(req) = requested else {
        return Ok(layers);
    };
    if req.is_empty() {
        return Err(Error::invalid("adapter placement", "no layers requested"));
    }
    let mut out = Vec::new();
    for name in req {
        let base = name.strip_suffix(".weight").unwrap_or(name);
        if base == HEAD || name.starts_with("head.") || name.ends_with(".bias") {
            return Err(Error::FrozenByPolicy(name.clone()));
        }
        if !layers.iter().any(|l| l == base) {
            return Err(Error::UnknownLayer(name.clone()));
        }
        if out.iter().any(|l: &String| l == base) {
            return Err(Error::invalid(
                "adapter placement",
                format!("'{name}' listed twice"),
            ));
        }
        out.push(base.to_string());
    }
    // Keep network order regardless of request order.
    out.sort_by_key(|n| layers.iter().position(|l| l == n));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptedLayer {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
}

/// Experts and per-segment mixing logits for a set of encoder layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolaAdapter {
    format: String,
    version: u32,
    plan: SegmentPlan,
    experts: usize,
    layers: Vec<AdaptedLayer>,
    params: ParamStore,
}

pub fn expert_b_name(layer: &str, p: usize) -> String {
    format!("{layer}.lora.{p}.b")
}

pub fn expert_a_name(layer: &str, p: usize) -> String {
    format!("{layer}.lora.{p}.a")
}

pub fn logits_name(layer: &str, k: usize) -> String {
    format!("{layer}.mix.{k}")
}

/// Rank actually used on a `d_out × d_in` layer: the requested rank, capped
/// so that it stays below `min(d_out, d_in)`.
pub fn layer_rank(requested: usize, d_out: usize, d_in: usize) -> Result<usize> {
    if requested == 0 {
        return Err(Error::invalid("LoRA rank", "rank must be ≥ 1"));
    }
    let cap = d_out.min(d_in).saturating_sub(1);
    if cap == 0 {
        return Err(Error::invalid(
            "LoRA rank",
            format!("a {d_out}×{d_in} layer admits no rank r < min(d_out, d_in)"),
        ));
    }
    Ok(requested.min(cap))
}

impl MolaAdapter {
    /// `P` experts per layer with `B = 0` and `A ~ N(0, 1/r)`; all logits
    /// start at zero (uniform mixing).
    pub fn new(
        foundation: &FoundationModel,
        plan: SegmentPlan,
        experts: usize,
        rank: usize,
        layers: Option<&[String]>,
        seed: u64,
    ) -> Result<Self> {
        if !foundation.is_frozen() {
            return Err(Error::NotFrozen);
        }
        if plan.seg_len() != foundation.head_out() {
            return Err(Error::PlanHeadMismatch {
                expected: plan.seg_len(),
                actual: foundation.head_out(),
            });
        }
        if experts == 0 {
            return Err(Error::invalid("adapter", "need at least one expert"));
        }
        if plan.seg_len() > foundation.lookback() + 1 {
            log::warn!(
                "segment length {} exceeds lookback + 1 = {}; a shared linear head cannot reach every target",
                plan.seg_len(),
                foundation.lookback() + 1
            );
        }
        let names = adapter_placement(foundation, layers)?;
        let all = foundation.encoder().layer_names();
        let dims = foundation.encoder().layer_dims();
        let mut params = ParamStore::new();
        let mut adapted = Vec::new();
        for name in names {
            let li = all
                .iter()
                .position(|l| *l == name)
                .expect("placement checked");
            let (d_out, d_in) = dims[li];
            let r = layer_rank(rank, d_out, d_in)?;
            if r < rank {
                log::warn!("LoRA rank on {name} ({d_out}×{d_in}) capped from {rank} to {r}");
            }
            let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt())
                .map_err(|e| Error::invalid("LoRA init", e.to_string()))?;
            for p in 0..experts {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[li as u64, p as u64]));
                let a: Vec<f64> = (0..r * d_in).map(|_| normal.sample(&mut rng)).collect();
                params.insert(expert_b_name(&name, p), Mat::zeros(d_out, r), true)?;
                params.insert(expert_a_name(&name, p), Mat::from_vec(r, d_in, a)?, true)?;
            }
            for k in 0..plan.segments() {
                params.insert(logits_name(&name, k), Mat::zeros(experts, 1), true)?;
            }
            adapted.push(AdaptedLayer {
                name,
                d_out,
                d_in,
                rank: r,
            });
        }
        Ok(MolaAdapter {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            plan,
            experts,
            layers: adapted,
            params,
        })
    }

    /// One dedicated expert per segment (`P = K`) with frozen one-hot
    /// mixing: the standalone per-segment LoRA variant.
    pub fn one_hot(
        foundation: &FoundationModel,
        plan: SegmentPlan,
        rank: usize,
        layers: Option<&[String]>,
        seed: u64,
    ) -> Result<Self> {
        let k_total = plan.segments();
        let mut ad = Self::new(foundation, plan, k_total, rank, layers, seed)?;
        for layer in ad.layer_names() {
            for k in 0..k_total {
                let mut logits = Mat::filled(k_total, 1, OFF_LOGIT);
                logits[(k, 0)] = 0.0;
                let name = logits_name(&layer, k);
                ad.params.set(&name, logits)?;
                ad.params.set_trainable(&name, false)?;
            }
        }
        Ok(ad)
    }

    pub fn plan(&self) -> SegmentPlan {
        self.plan
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn layers(&self) -> &[AdaptedLayer] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_segment(&self, k: usize) -> Result<()> {
        if k >= self.plan.segments() {
            return Err(Error::invalid(
                "segment",
                format!("index {k} with {} segments", self.plan.segments()),
            ));
        }
        Ok(())
    }

    /// Mixing weights of segment `k` on `layer`.
    pub fn delta(&self, layer: &str, k: usize) -> Result<Vec<f64>> {
        self.check_segment(k)?;
        normalize_weights(self.params.get(&logits_name(layer, k))?.data())
    }

    pub fn expert(&self, layer: &str, p: usize) -> Result<LoraExpert> {
        Ok(LoraExpert {
            b: self.params.get(&expert_b_name(layer, p))?.clone(),
            a: self.params.get(&expert_a_name(layer, p))?.clone(),
        })
    }

    fn expert_refs(&self, layer: &str) -> Result<Vec<(&Mat, &Mat)>> {
        (0..self.experts)
            .map(|p| {
                Ok((
                    self.params.get(&expert_b_name(layer, p))?,
                    self.params.get(&expert_a_name(layer, p))?,
                ))
            })
            .collect()
    }

    pub fn effective(&self, foundation: &FoundationModel, layer: &str, k: usize) -> Result<Mat> {
        let base = foundation.params().get(&weight_name(layer))?;
        mix(base, &self.expert_refs(layer)?, &self.delta(layer, k)?)
    }

    /// Freezes the logits of segment `k` on every layer.
    pub fn freeze_segment(&mut self, k: usize) -> Result<()> {
        self.check_segment(k)?;
        for l in self.layer_names() {
            self.params.set_trainable(&logits_name(&l, k), false)?;
        }
        Ok(())
    }

    pub fn segment_frozen(&self, k: usize) -> Result<bool> {
        self.check_segment(k)?;
        for l in &self.layers {
            if self.params.is_trainable(&logits_name(&l.name, k))? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// The segment-`k` model: adapted encoder weights, everything else read
    /// from the frozen foundation.
    pub fn view<'a>(&self, foundation: &'a FoundationModel, k: usize) -> Result<AdaptedView<'a>> {
        self.check_compatible(foundation)?;
        let names = foundation.encoder().layer_names();
        let mut eff = Vec::with_capacity(names.len());
        for n in &names {
            eff.push(if self.layers.iter().any(|l| &l.name == n) {
                Some(self.effective(foundation, n, k)?)
            } else {
                None
            });
        }
        Ok(AdaptedView {
            foundation,
            effective: eff,
        })
    }

    fn check_compatible(&self, foundation: &FoundationModel) -> Result<()> {
        if !foundation.is_frozen() {
            return Err(Error::NotFrozen);
        }
        if foundation.head_out() != self.plan.seg_len() {
            return Err(Error::PlanHeadMismatch {
                expected: self.plan.seg_len(),
                actual: foundation.head_out(),
            });
        }
        let dims = foundation.encoder().layer_dims();
        let names = foundation.encoder().layer_names();
        for l in &self.layers {
            let i = names
                .iter()
                .position(|n| *n == l.name)
                .ok_or_else(|| Error::UnknownLayer(l.name.clone()))?;
            if dims[i] != (l.d_out, l.d_in) {
                return Err(Error::shape(
                    "adapter",
                    format!(
                        "{} is {:?} in the foundation, adapter expects {:?}",
                        l.name,
                        dims[i],
                        (l.d_out, l.d_in)
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Segment-`k` forecast of `L×N` inputs: `S×N`.
    pub fn forecast_segment(&self, foundation: &FoundationModel, k: usize, x: &Mat) -> Result<Mat> {
        self.view(foundation, k)?.forecast(x)
    }

    /// Full `T×N` forecast: segment `k`'s outputs fill rows `steps(k)`.
    pub fn forecast(&self, foundation: &FoundationModel, x: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros(self.plan.horizon(), x.cols());
        for k in 0..self.plan.segments() {
            let part = self.forecast_segment(foundation, k, x)?;
            for (r, step) in self.plan.steps(k).enumerate() {
                out.row_mut(step).copy_from_slice(part.row(r));
            }
        }
        Ok(out)
    }

    /// Adds `weight · ∂mse_k/∂θ` into `grads` for every trainable adapter
    /// entry and returns the unweighted segment MSE. `y` holds the segment's
    /// `S` label rows.
    pub fn accumulate_segment_grads(
        &self,
        foundation: &FoundationModel,
        k: usize,
        x: &Mat,
        y: &Mat,
        weight: f64,
        grads: &mut GradStore,
    ) -> Result<f64> {
        if x.cols() == 0 {
            return Err(Error::EmptyBatch);
        }
        let view = self.view(foundation, k)?;
        let w = view.weights()?;
        if x.rows() != foundation.lookback() {
            return Err(Error::shape("adapter input", format!("{} rows", x.rows())));
        }
        let trace = w.forward(x)?;
        let (loss, d_out) = mse_and_grad(&trace.out, y)?;
        let d_out = if weight == 1.0 {
            d_out
        } else {
            d_out.scale(weight)
        };
        let g = w.backward(&trace, &d_out)?;
        let names = foundation.encoder().layer_names();
        for layer in &self.layers {
            let li = names
                .iter()
                .position(|n| *n == layer.name)
                .expect("checked");
            let g_eff = &g.enc_w[li];
            let delta = self.delta(&layer.name, k)?;
            let experts = self.expert_refs(&layer.name)?;
            let logits = logits_name(&layer.name, k);
            let mut d_delta = vec![0.0; self.experts];
            for (p, &(b, a)) in experts.iter().enumerate() {
                let bn = expert_b_name(&layer.name, p);
                let an = expert_a_name(&layer.name, p);
                if self.params.is_trainable(&bn)? {
                    add_grad(grads, &bn, g_eff.matmul_t(a)?.scale(delta[p]))?;
                }
                if self.params.is_trainable(&an)? {
                    add_grad(grads, &an, b.t_matmul(g_eff)?.scale(delta[p]))?;
                }
                if self.params.is_trainable(&logits)? {
                    d_delta[p] = g_eff.dot(&b.matmul(a)?)?;
                }
            }
            if self.params.is_trainable(&logits)? {
                let mean: f64 = delta.iter().zip(&d_delta).map(|(d, g)| d * g).sum();
                let dz: Vec<f64> = delta
                    .iter()
                    .zip(&d_delta)
                    .map(|(d, g)| d * (g - mean))
                    .collect();
                add_grad(grads, &logits, Mat::from_vec(self.experts, 1, dz)?)?;
            }
        }
        Ok(loss)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: MolaAdapter = serde_json::from_str(text)?;
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        let expected = self.layers.len() * (2 * self.experts + self.plan.segments());
        if self.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} entries, expected {expected}",
                self.params.len()
            )));
        }
        for l in &self.layers {
            let check = |name: String, shape: (usize, usize)| -> Result<()> {
                let m = self
                    .params
                    .get(&name)
                    .map_err(|_| Error::Checkpoint(format!("missing entry '{name}'")))?;
                if m.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "'{name}' has shape {:?}, expected {shape:?}",
                        m.shape()
                    )));
                }
                Ok(())
            };
            for p in 0..self.experts {
                check(expert_b_name(&l.name, p), (l.d_out, l.rank))?;
                check(expert_a_name(&l.name, p), (l.rank, l.d_in))?;
            }
            for k in 0..self.plan.segments() {
                check(logits_name(&l.name, k), (self.experts, 1))?;
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut GradStore, name: &str, g: Mat) -> Result<()> {
    match grads.get_mut(name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name.to_string(), g);
            Ok(())
        }
    }
}

/// A segment-specific model: adapted encoder weights over a frozen
/// foundation. Biases and non-adapted layers alias the foundation.
pub struct AdaptedView<'a> {
    foundation: &'a FoundationModel,
    effective: Vec<Option<Mat>>,
}

impl<'a> AdaptedView<'a> {
    pub(crate) fn weights(&self) -> Result<Weights<'_>> {
        let p = self.foundation.params();
        let names = self.foundation.encoder().layer_names();
        let mut enc_w = Vec::with_capacity(names.len());
        let mut enc_b = Vec::with_capacity(names.len());
        for (n, eff) in names.iter().zip(&self.effective) {
            enc_w.push(match eff {
                Some(m) => m,
                None => p.get(&weight_name(n))?,
            });
            enc_b.push(p.get(&bias_name(n))?);
        }
        Ok(Weights {
            enc_w,
            enc_b,
            head_w: p.get(&weight_name(HEAD))?,
            head_b: p.get(&bias_name(HEAD))?,
            activation: self.foundation.encoder().activation,
        })
    }

    pub fn encoder_weight(&self, i: usize) -> Option<&Mat> {
        self.effective.get(i).and_then(|m| m.as_ref())
    }

    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        self.weights()?.encode(x)
    }

    pub fn forecast(&self, x: &Mat) -> Result<Mat> {
        if x.rows() != self.foundation.lookback() {
            return Err(Error::shape(
                "adapted forecast",
                format!(
                    "{} history rows, lookback is {}",
                    x.rows(),
                    self.foundation.lookback()
                ),
            ));
        }
        Ok(self.weights()?.forward(x)?.out)
    }
}
