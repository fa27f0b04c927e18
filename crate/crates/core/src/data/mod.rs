//! Series datasets: synthetic generation, CSV ingestion, chronological
//! splits, train-only standardization and sliding-window sampling.

mod csv_io;
mod synth;
mod window;

pub use csv_io::{load_csv, read_csv, write_csv, CsvSchema};
pub use synth::{Component, SynthSpec};
pub use window::{windows, SplitKind, SplitWindows, WindowSample, WindowSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Row boundaries of the chronological train/validation/test split.
///
/// Train is `0..train_end`, validation `train_end..val_end` and test
/// `val_end..test_end`. Rows past `test_end` are unused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

/// How to cut a series into train/validation/test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    /// Fractions of the series length, rounded to the nearest row.
    Ratios([f64; 3]),
    /// Explicit row counts, taken from the start of the series.
    Counts([usize; 3]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios([0.7, 0.1, 0.2])
    }
}

impl SplitSpec {
    pub fn resolve(&self, n: usize) -> Result<Split> {
        let split = match *self {
            SplitSpec::Ratios([tr, va, te]) => {
                if [tr, va, te].iter().any(|r| !(r.is_finite() && *r >= 0.0))
                    || tr <= 0.0
                    || va <= 0.0
                {
                    return Err(Error::invalid("split ratios", format!("{tr}/{va}/{te}")));
                }
                let total = tr + va + te;
                if total > 1.0 + 1e-9 {
                    return Err(Error::invalid(
                        "split ratios",
                        format!("sum {total} exceeds 1"),
                    ));
                }
                let train_end = (tr * n as f64).round() as usize;
                let val_end = ((tr + va) * n as f64).round() as usize;
                let test_end = (((tr + va + te) * n as f64).round() as usize).min(n);
                Split {
                    train_end,
                    val_end,
                    test_end,
                }
            }
            SplitSpec::Counts([tr, va, te]) => Split {
                train_end: tr,
                val_end: tr + va,
                test_end: tr + va + te,
            },
        };
        split.validate(n)?;
        Ok(split)
    }
}

impl Split {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(0 < self.train_end
            && self.train_end < self.val_end
            && self.val_end <= self.test_end
            && self.test_end <= n)
        {
            return Err(Error::invalid(
                "split",
                format!(
                    "boundaries {}/{}/{} for {n} rows",
                    self.train_end, self.val_end, self.test_end
                ),
            ));
        }
        Ok(())
    }
}

/// Per-channel z-score statistics computed on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// An N×D multivariate series with its split and optional normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    values: Mat,
    channel_names: Vec<String>,
    split: Split,
    norm_stats: Option<Vec<ChannelStats>>,
}

impl SeriesDataset {
    pub fn new(values: Mat, channel_names: Vec<String>, split: Split) -> Result<Self> {
        if channel_names.len() != values.cols() {
            return Err(Error::shape(
                "SeriesDataset::new",
                format!(
                    "{} names for {} channels",
                    channel_names.len(),
                    values.cols()
                ),
            ));
        }
        if !values.is_finite() {
            return Err(Error::invalid("dataset", "non-finite observation"));
        }
        split.validate(values.rows())?;
        Ok(SeriesDataset {
            values,
            channel_names,
            split,
            norm_stats: None,
        })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Result<Self> {
        split.validate(self.values.rows())?;
        self.split = split;
        Ok(self)
    }

    pub fn norm_stats(&self) -> Option<&[ChannelStats]> {
        self.norm_stats.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Z-scores every channel with mean and (population) standard deviation
    /// of the training rows only.
    pub fn standardize(&self) -> Result<SeriesDataset> {
        let n_train = self.split.train_end;
        let d = self.channels();
        let mut stats = Vec::with_capacity(d);
        for c in 0..d {
            let col: Vec<f64> = (0..n_train).map(|i| self.values[(i, c)]).collect();
            let mean = col.iter().sum::<f64>() / n_train as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_train as f64;
            let std = var.sqrt();
            if std <= 1e-12 * mean.abs().max(1.0) {
                return Err(Error::ZeroVariance { channel: c });
            }
            stats.push(ChannelStats { mean, std });
        }
        let mut values = self.values.clone();
        for i in 0..values.rows() {
            for (v, s) in values.row_mut(i).iter_mut().zip(&stats) {
                *v = (*v - s.mean) / s.std;
            }
        }
        Ok(SeriesDataset {
            values,
            channel_names: self.channel_names.clone(),
            split: self.split,
            norm_stats: Some(stats),
        })
    }

    /// Maps a standardized dataset back to original units.
    pub fn destandardize(&self) -> Result<SeriesDataset> {
        let stats = self
            .norm_stats
            .as_ref()
            .ok_or_else(|| Error::invalid("destandardize", "dataset is not standardized"))?;
        Ok(SeriesDataset {
            values: invert_standardization(&self.values, stats)?,
            channel_names: self.channel_names.clone(),
            split: self.split,
            norm_stats: None,
        })
    }
}

/// Undoes a per-channel z-score on any rows×D block (forecasts, labels).
pub fn invert_standardization(block: &Mat, stats: &[ChannelStats]) -> Result<Mat> {
    if block.cols() != stats.len() {
        return Err(Error::shape(
            "invert_standardization",
            format!("{} columns, {} channel stats", block.cols(), stats.len()),
        ));
    }
    let mut out = block.clone();
    for i in 0..out.rows() {
        for (v, s) in out.row_mut(i).iter_mut().zip(stats) {
            *v = *v * s.std + s.mean;
        }
    }
    Ok(out)
}
