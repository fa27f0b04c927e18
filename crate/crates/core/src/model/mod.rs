//! Encoder/decoder forecasting models with hand-written gradients.
//!
//! Every channel is forecast independently with shared temporal weights: a
//! history block `L×D` is treated as `D` columns, each mapped `L → rep → S`.

mod net;
mod params;

pub use params::{GradStore, ParamEntry, ParamStore};

pub(crate) use net::{mse_and_grad, Weights};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const HEAD: &str = "head";

/// Format tag and version written into foundation checkpoints.
pub const CHECKPOINT_FORMAT: &str = "mola-foundation";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Linear,
    Mlp2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Only per-channel weight sharing is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    #[default]
    PerChannelShared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Lookback length L.
    pub in_len: usize,
    /// Hidden widths: none for `linear`, exactly two for `mlp2`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub channel_mode: ChannelMode,
}

impl EncoderSpec {
    /// Single `L → L` affine layer.
    pub fn linear(in_len: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::Linear,
            in_len,
            hidden: vec![],
            activation: Activation::Relu,
            channel_mode: ChannelMode::PerChannelShared,
        }
    }

    /// `L → h1 → h2` with the activation after the first layer only; the
    /// `h2`-dimensional output is the representation.
    pub fn mlp2(in_len: usize, h1: usize, h2: usize, activation: Activation) -> Self {
        EncoderSpec {
            kind: EncoderKind::Mlp2,
            in_len,
            hidden: vec![h1, h2],
            activation,
            channel_mode: ChannelMode::PerChannelShared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_len == 0 {
            return Err(Error::invalid("encoder", "in_len must be ≥ 1"));
        }
        match self.kind {
            EncoderKind::Linear if !self.hidden.is_empty() => Err(Error::invalid(
                "encoder",
                "a linear encoder takes no hidden widths",
            )),
            EncoderKind::Mlp2 if self.hidden.len() != 2 || self.hidden.contains(&0) => {
                Err(Error::invalid(
                    "encoder",
                    format!(
                        "mlp2 needs exactly two positive hidden widths, got {:?}",
                        self.hidden
                    ),
                ))
            }
            _ => Ok(()),
        }
    }

    /// `(d_out, d_in)` of each encoder layer, input first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.kind {
            EncoderKind::Linear => vec![(self.in_len, self.in_len)],
            EncoderKind::Mlp2 => vec![
                (self.hidden[0], self.in_len),
                (self.hidden[1], self.hidden[0]),
            ],
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.layer_dims().last().map(|d| d.0).unwrap_or(self.in_len)
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.layer_dims().len()).map(encoder_layer).collect()
    }
}

pub fn encoder_layer(i: usize) -> String {
    format!("encoder.{i}")
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Mixes a base seed with tags into an independent stream seed (SplitMix64).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in std::iter::once(&0x5eed).chain(tags) {
        z = z.wrapping_add(t).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// An encoder plus an `S`-step linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationModel {
    format: String,
    version: u32,
    encoder: EncoderSpec,
    head_out: usize,
    params: ParamStore,
}

impl FoundationModel {
    /// Weights ~ U(±1/√fan_in), biases 0, all entries trainable.
    pub fn new(encoder: EncoderSpec, head_out: usize, seed: u64) -> Result<Self> {
        encoder.validate()?;
        if head_out == 0 {
            return Err(Error::invalid("model", "head_out must be ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers: Vec<(String, usize, usize)> = encoder
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (o, n))| (encoder_layer(i), o, n))
            .collect();
        layers.push((HEAD.to_string(), head_out, encoder.rep_dim()));
        for (name, d_out, d_in) in layers {
            let k = 1.0 / (d_in as f64).sqrt();
            let w: Vec<f64> = (0..d_out * d_in).map(|_| rng.random_range(-k..k)).collect();
            params.insert(weight_name(&name), Mat::from_vec(d_out, d_in, w)?, true)?;
            params.insert(bias_name(&name), Mat::zeros(d_out, 1), true)?;
        }
        Ok(FoundationModel {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            encoder,
            head_out,
            params,
        })
    }

    pub fn encoder(&self) -> &EncoderSpec {
        &self.encoder
    }

    pub fn head_out(&self) -> usize {
        self.head_out
    }

    pub fn lookback(&self) -> usize {
        self.encoder.in_len
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.entries().iter().all(|e| !e.trainable)
    }

    pub(crate) fn weights(&self) -> Result<Weights<'_>> {
        let names = self.encoder.layer_names();
        let mut enc_w = Vec::with_capacity(names.len());
        let mut enc_b = Vec::with_capacity(names.len());
        for n in &names {
            enc_w.push(self.params.get(&weight_name(n))?);
            enc_b.push(self.params.get(&bias_name(n))?);
        }
        Ok(Weights {
            enc_w,
            enc_b,
            head_w: self.params.get(&weight_name(HEAD))?,
            head_b: self.params.get(&bias_name(HEAD))?,
            activation: self.encoder.activation,
        })
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.rows() != self.lookback() {
            return Err(Error::shape(
                "model input",
                format!("{} history rows, lookback is {}", x.rows(), self.lookback()),
            ));
        }
        Ok(())
    }

    /// Representation of each column: `L×N → rep×N`. A history block `L×D`
    /// gives one column per channel.
    pub fn encode(&self, history: &Mat) -> Result<Mat> {
        self.check_input(history)?;
        self.weights()?.encode(history)
    }

    /// `W·R + b` per column.
    pub fn decode(&self, rep: &Mat) -> Result<Mat> {
        net::affine(
            self.params.get(&weight_name(HEAD))?,
            self.params.get(&bias_name(HEAD))?,
            rep,
        )
    }

    /// `S×N` forecast of `L×N` inputs.
    pub fn forecast(&self, history: &Mat) -> Result<Mat> {
        self.check_input(history)?;
        Ok(self.weights()?.forward(history)?.out)
    }

    /// MSE of `forecast(x)` against `y` (`S×N`) and gradients for every
    /// trainable entry.
    pub fn loss_and_grads_xy(&self, x: &Mat, y: &Mat) -> Result<(f64, GradStore)> {
        self.check_input(x)?;
        if x.cols() == 0 {
            return Err(Error::EmptyBatch);
        }
        if y.shape() != (self.head_out, x.cols()) {
            return Err(Error::shape(
                "loss target",
                format!(
                    "target {:?}, forecast {:?}",
                    y.shape(),
                    (self.head_out, x.cols())
                ),
            ));
        }
        let w = self.weights()?;
        let trace = w.forward(x)?;
        let (loss, d_out) = mse_and_grad(&trace.out, y)?;
        let g = w.backward(&trace, &d_out)?;
        let mut grads = GradStore::new();
        let mut put = |name: String, m: Mat| -> Result<()> {
            if self.params.is_trainable(&name)? {
                grads.insert(name, m);
            }
            Ok(())
        };
        for (i, (gw, gb)) in g.enc_w.into_iter().zip(g.enc_b).enumerate() {
            let layer = encoder_layer(i);
            put(weight_name(&layer), gw)?;
            put(bias_name(&layer), gb)?;
        }
        put(weight_name(HEAD), g.head_w)?;
        put(bias_name(HEAD), g.head_b)?;
        Ok((loss, grads))
    }

    /// Loss over a batch of windows against label steps `steps` (0-based,
    /// length `head_out`).
    pub fn loss_and_grads(
        &self,
        batch: &[WindowSample],
        steps: Range<usize>,
    ) -> Result<(f64, GradStore)> {
        let (x, y) = stack_batch(batch, steps)?;
        self.loss_and_grads_xy(&x, &y)
    }

    /// Recursive forecast with a one-step head: each prediction is appended
    /// to the window and the oldest row dropped, `horizon` times.
    pub fn ar_f_forecast(&self, history: &Mat, horizon: usize) -> Result<Mat> {
        if self.head_out != 1 {
            return Err(Error::invalid(
                "recursive forecast",
                format!("needs a one-step head, model has {} outputs", self.head_out),
            ));
        }
        self.check_input(history)?;
        let (l, n) = history.shape();
        let w = self.weights()?;
        let mut window = history.clone();
        let mut out = Mat::zeros(horizon, n);
        for t in 0..horizon {
            let next = w.forward(&window)?.out;
            out.row_mut(t).copy_from_slice(next.row(0));
            let mut shifted = Mat::zeros(l, n);
            for r in 0..l - 1 {
                shifted.row_mut(r).copy_from_slice(window.row(r + 1));
            }
            shifted.row_mut(l - 1).copy_from_slice(next.row(0));
            window = shifted;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: FoundationModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        self.encoder.validate()?;
        let mut expected: Vec<(String, (usize, usize))> = Vec::new();
        let mut dims = self.encoder.layer_dims();
        dims.push((self.head_out, self.encoder.rep_dim()));
        for (i, (o, n)) in dims.into_iter().enumerate() {
            let layer = if i < self.encoder.layer_dims().len() {
                encoder_layer(i)
            } else {
                HEAD.to_string()
            };
            expected.push((weight_name(&layer), (o, n)));
            expected.push((bias_name(&layer), (o, 1)));
        }
        let names: Vec<&str> = self.params.names().collect();
        if names.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{} entries, expected {}",
                names.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
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
        }
        Ok(())
    }
}

/// Stacks windows into `L×(B·D)` inputs and `|steps|×(B·D)` targets.
pub fn stack_batch(batch: &[WindowSample], steps: Range<usize>) -> Result<(Mat, Mat)> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let (l, d) = first.history.shape();
    let t = first.label.rows();
    if steps.start >= steps.end || steps.end > t {
        return Err(Error::shape(
            "target steps",
            format!("{steps:?} outside horizon {t}"),
        ));
    }
    let cols = batch.len() * d;
    let mut x = Mat::zeros(l, cols);
    let mut y = Mat::zeros(steps.len(), cols);
    for (b, s) in batch.iter().enumerate() {
        if s.history.shape() != (l, d) || s.label.rows() != t {
            return Err(Error::shape("batch", "windows differ in shape"));
        }
        for r in 0..l {
            x.row_mut(r)[b * d..(b + 1) * d].copy_from_slice(s.history.row(r));
        }
        for (r, step) in steps.clone().enumerate() {
            y.row_mut(r)[b * d..(b + 1) * d].copy_from_slice(s.label.row(step));
        }
    }
    Ok((x, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn metrics(pred: &Mat, label: &Mat) -> Result<Metrics> {
    let diff = pred.sub(label)?;
    let n = diff.data().len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(Metrics {
        mse: diff.frobenius_sq() / n as f64,
        mae: diff.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64,
    })
}
