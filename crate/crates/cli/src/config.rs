//! Run configuration: a TOML file with `[dataset]`, `[model]`,
//! `[paradigm]`, `[train]`, `[output]` and `[analysis]` sections.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides in command-line order, then the dedicated flags (`--seed`,
//! `--run-dir`).

use std::path::{Path, PathBuf};

use mola_core::adapt::make_segment_plan;
use mola_core::data::{load_csv, CsvSchema, SeriesDataset, SplitSpec, SplitWindows, SynthSpec};
use mola_core::model::{Activation, EncoderKind, EncoderSpec};
use mola_core::train::{AdamConfig, AdaptSchedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub paradigm: Paradigm,
    pub train: TrainSection,
    pub output: OutputSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    /// The two-channel synthetic case study: L = 16, T = 32, a 16→16→2
    /// ReLU encoder and MoLA with K = 4, P = 4, r = 4.
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSection {
                csv: None,
                synth: Some(SynthSpec::default()),
                split: None,
                lookback: 16,
                horizon: 32,
                standardize: true,
            },
            model: ModelSection::default(),
            paradigm: Paradigm::Mola {
                segments: 4,
                experts: 4,
                rank: 4,
                layers: None,
                schedule: AdaptSchedule::Joint,
            },
            train: TrainSection::default(),
            output: OutputSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

/// Exactly one of `csv` and `synth` must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    /// Overrides the split of either source. CSV defaults to 0.7/0.1/0.2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    pub lookback: usize,
    pub horizon: usize,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: EncoderKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: EncoderKind::Mlp2,
            hidden: vec![16, 2],
            activation: Activation::Relu,
        }
    }
}

/// Which forecasting paradigm the run trains. Adapter fields exist only
/// on `mola`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Paradigm {
    /// Recursive one-step model.
    #[serde(rename = "ar-f")]
    Arf {},
    /// One head over the whole horizon.
    #[serde(rename = "mt-f")]
    Mtf {},
    Mola {
        segments: usize,
        experts: usize,
        rank: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layers: Option<Vec<String>>,
        #[serde(default)]
        schedule: AdaptSchedule,
    },
}

impl Paradigm {
    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::Arf {} => "ar-f",
            Paradigm::Mtf {} => "mt-f",
            Paradigm::Mola { .. } => "mola",
        }
    }
}

/// Settings for one run of the training loop. Pre-training uses its own
/// epoch budget; adaptation may use its own learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub pretrain_max_epochs: usize,
    pub pretrain_patience: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_learning_rate: Option<f64>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::baseline(0);
        let pre = TrainConfig::pretraining(0);
        TrainSection {
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            patience: base.patience,
            pretrain_max_epochs: pre.max_epochs,
            pretrain_patience: pre.patience,
            adapt_learning_rate: None,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainSection {
    /// Baselines.
    pub fn baseline(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            adam: self.adam,
        }
    }

    pub fn pretraining(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.pretrain_max_epochs,
            patience: self.pretrain_patience,
            ..self.baseline()
        }
    }

    pub fn adaptation(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.adapt_learning_rate.unwrap_or(self.learning_rate),
            ..self.baseline()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    /// Formats for reports; checkpoints and records are always JSON.
    pub formats: Vec<Format>,
    /// Also score forecasts in original units.
    pub destandardize: bool,
    /// Prefix horizons for per-horizon rows; defaults to the full horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizons: Option<Vec<usize>>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            run_dir: None,
            formats: vec![Format::Json, Format::Csv],
            destandardize: false,
            horizons: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// 1-based steps for the per-step probe; defaults to `1, T/2, T`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_steps: Option<Vec<usize>>,
    /// Seeds for `compare`; defaults to the training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

impl RunConfig {
    /// Reads `path` (if any), applies `--set` overrides, and validates.
    ///
    /// A section present in the file replaces the default section as a
    /// whole; `--set` then edits single fields of the result. A whole
    /// section can be replaced with an inline table, for example
    /// `--set 'paradigm={kind="mt-f"}'`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
        let from_file: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::user(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    CliError::user(format!("config {}: {}", p.display(), e.message()))
                })?
            }
            None => RunConfig::default(),
        };
        let cfg = if overrides.is_empty() {
            from_file
        } else {
            let mut table = toml::Table::try_from(&from_file)
                .map_err(|e| CliError::Internal(format!("config does not serialize: {e}")))?;
            for item in overrides {
                apply_override(&mut table, item)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    CliError::user(format!("config after --set: {}", e.message()))
                })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        match (&d.csv, &d.synth) {
            (Some(_), Some(_)) => {
                return Err(CliError::user(
                    "dataset: give either `csv` or `synth`, not both",
                ))
            }
            (None, None) => {
                return Err(CliError::user(
                    "dataset: one of `csv` or `synth` is required",
                ))
            }
            _ => {}
        }
        if let Some(s) = &d.synth {
            s.validate()?;
        }
        if d.lookback == 0 || d.horizon == 0 {
            return Err(CliError::user(
                "dataset: lookback and horizon must be positive",
            ));
        }
        self.encoder().validate()?;
        if let Paradigm::Mola {
            segments,
            experts,
            rank,
            ..
        } = self.paradigm
        {
            make_segment_plan(d.horizon, segments)?;
            if experts == 0 || rank == 0 {
                return Err(CliError::user(
                    "paradigm: experts and rank must be positive",
                ));
            }
        }
        for t in [
            self.train.baseline(),
            self.train.pretraining(),
            self.train.adaptation(),
        ] {
            t.validate()?;
        }
        if self.output.formats.is_empty() {
            return Err(CliError::user(
                "output.formats must list at least one format",
            ));
        }
        let horizons = self.horizons();
        if horizons.is_empty() || horizons.iter().any(|&h| h == 0 || h > d.horizon) {
            return Err(CliError::user(format!(
                "output.horizons {horizons:?} must lie in 1..={}",
                d.horizon
            )));
        }
        if let Some(steps) = &self.analysis.probe_steps {
            if steps.iter().any(|&s| s == 0 || s > d.horizon) {
                return Err(CliError::user(format!(
                    "analysis.probe_steps {steps:?} must lie in 1..={}",
                    d.horizon
                )));
            }
        }
        if self.analysis.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(CliError::user("analysis.seeds is empty"));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderSpec {
        let mut spec = EncoderSpec::linear(self.dataset.lookback);
        spec.kind = self.model.kind;
        spec.hidden = self.model.hidden.clone();
        spec.activation = self.model.activation;
        spec
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.output
            .horizons
            .clone()
            .unwrap_or_else(|| vec![self.dataset.horizon])
    }

    pub fn probe_steps(&self) -> Vec<usize> {
        self.analysis.probe_steps.clone().unwrap_or_else(|| {
            let t = self.dataset.horizon;
            let mut s = vec![1, t.div_ceil(2), t];
            s.dedup();
            s
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.analysis
            .seeds
            .clone()
            .unwrap_or_else(|| vec![self.train.seed])
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }

    /// Sets the training seed, and the synthetic data seed if present.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let Some(s) = &mut self.dataset.synth {
            s.seed = seed;
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The dataset as configured: split applied and optionally
    /// standardized with training-split statistics.
    pub fn load_dataset(&self) -> CliResult<SeriesDataset> {
        let d = &self.dataset;
        let raw = match (&d.csv, &d.synth) {
            (Some(path), _) => {
                let schema = CsvSchema {
                    split: d.split.unwrap_or_default(),
                };
                load_csv(path, &schema).map_err(|e| match e {
                    mola_core::Error::Io(io) => {
                        CliError::user(format!("cannot read dataset {}: {io}", path.display()))
                    }
                    other => other.into(),
                })?
            }
            (None, Some(spec)) => {
                let ds = spec.generate()?;
                match d.split {
                    Some(s) => {
                        let split = s.resolve(ds.len())?;
                        ds.with_split(split)?
                    }
                    None => ds,
                }
            }
            (None, None) => unreachable!("validated"),
        };
        Ok(if d.standardize {
            raw.standardize()?
        } else {
            raw
        })
    }

    pub fn windows(&self, ds: &SeriesDataset) -> CliResult<SplitWindows> {
        Ok(SplitWindows::new(
            ds,
            self.dataset.lookback,
            self.dataset.horizon,
        )?)
    }
}

/// Applies one `key.path=value` override. The value is read as a TOML
/// value, falling back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::user(format!("--set expects key=value, got '{item}'")))?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::user(format!("--set: bad key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::user(format!("--set: '{part}' in '{key}' is not a section"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
