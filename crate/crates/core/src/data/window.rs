use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SeriesDataset;
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

/// One (history, label) pair cut from a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// L×D, rows `origin−L+1 ..= origin`.
    pub history: Mat,
    /// T×D, rows `origin+1 ..= origin+T`.
    pub label: Mat,
    /// Row index of the last history observation.
    pub origin: usize,
}

/// Stride-1 windows of one split, stored as origins into shared values.
///
/// Labels never leave their split. Validation and test windows may draw
/// history from the preceding split, as in the usual benchmark convention.
#[derive(Clone, Debug)]
pub struct WindowSet {
    values: Arc<Mat>,
    lookback: usize,
    horizon: usize,
    kind: SplitKind,
    origins: Vec<usize>,
}

impl WindowSet {
    pub fn new(
        ds: &SeriesDataset,
        lookback: usize,
        horizon: usize,
        kind: SplitKind,
    ) -> Result<Self> {
        Self::from_shared(Arc::new(ds.values().clone()), ds, lookback, horizon, kind)
    }

    fn from_shared(
        values: Arc<Mat>,
        ds: &SeriesDataset,
        lookback: usize,
        horizon: usize,
        kind: SplitKind,
    ) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::invalid(
                "window",
                format!("lookback {lookback} and horizon {horizon} must be ≥ 1"),
            ));
        }
        let split = ds.split();
        let (start, end) = match kind {
            SplitKind::Train => (0, split.train_end),
            SplitKind::Val => (split.train_end, split.val_end),
            SplitKind::Test => (split.val_end, split.test_end),
        };
        // Label rows must lie in start..end; history rows must exist.
        let first = start.saturating_sub(1).max(lookback - 1);
        let too_short = || Error::SplitTooShort {
            split: kind.name(),
            len: end - start,
            lookback,
            horizon,
        };
        let last = end.checked_sub(horizon + 1).ok_or_else(too_short)?;
        if last < first {
            return Err(too_short());
        }
        Ok(WindowSet {
            values,
            lookback,
            horizon,
            kind,
            origins: (first..=last).collect(),
        })
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn kind(&self) -> SplitKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn sample(&self, i: usize) -> WindowSample {
        let n = self.origins[i];
        let d = self.channels();
        let rows = |r: Range<usize>| {
            Mat::from_parts(
                r.len(),
                d,
                self.values.data()[r.start * d..r.end * d].to_vec(),
            )
        };
        WindowSample {
            history: rows(n + 1 - self.lookback..n + 1),
            label: rows(n + 1..n + 1 + self.horizon),
            origin: n,
        }
    }

    pub fn samples(&self) -> Vec<WindowSample> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    /// Histories of the selected windows side by side: L × (|idx|·D), with
    /// column `b·D + c` holding channel `c` of window `idx[b]`.
    pub fn inputs(&self, idx: &[usize]) -> Mat {
        let d = self.channels();
        let l = self.lookback;
        let width = idx.len() * d;
        let mut out = Mat::zeros(l, width);
        for (b, &w) in idx.iter().enumerate() {
            let n = self.origins[w];
            for s in 0..l {
                let src = self.values.row(n + 1 - l + s);
                out.row_mut(s)[b * d..(b + 1) * d].copy_from_slice(src);
            }
        }
        out
    }

    /// Label steps `steps` (0-based within the horizon) of the selected
    /// windows, in the same column layout as [`WindowSet::inputs`].
    pub fn labels(&self, idx: &[usize], steps: Range<usize>) -> Result<Mat> {
        if steps.end > self.horizon || steps.start >= steps.end {
            return Err(Error::shape(
                "labels",
                format!("steps {steps:?} outside horizon {}", self.horizon),
            ));
        }
        let d = self.channels();
        let mut out = Mat::zeros(steps.len(), idx.len() * d);
        for (b, &w) in idx.iter().enumerate() {
            let n = self.origins[w];
            for (s, step) in steps.clone().enumerate() {
                let src = self.values.row(n + 1 + step);
                out.row_mut(s)[b * d..(b + 1) * d].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Number of univariate series: one per (window, channel) pair.
    pub fn series_count(&self) -> usize {
        self.len() * self.channels()
    }

    /// Histories of univariate series, one per column: series `i` is
    /// channel `i mod D` of window `i div D`. Indexing all series in order
    /// reproduces [`WindowSet::inputs`] over all windows.
    pub fn series_inputs(&self, idx: &[usize]) -> Mat {
        let d = self.channels();
        let l = self.lookback;
        let mut out = Mat::zeros(l, idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let (n, c) = (self.origins[i / d], i % d);
            for s in 0..l {
                out[(s, b)] = self.values[(n + 1 - l + s, c)];
            }
        }
        out
    }

    /// Label steps of univariate series, in the layout of
    /// [`WindowSet::series_inputs`].
    pub fn series_labels(&self, idx: &[usize], steps: Range<usize>) -> Result<Mat> {
        if steps.end > self.horizon || steps.start >= steps.end {
            return Err(Error::shape(
                "labels",
                format!("steps {steps:?} outside horizon {}", self.horizon),
            ));
        }
        let d = self.channels();
        let mut out = Mat::zeros(steps.len(), idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let (n, c) = (self.origins[i / d], i % d);
            for (s, step) in steps.clone().enumerate() {
                out[(s, b)] = self.values[(n + 1 + step, c)];
            }
        }
        Ok(out)
    }

    /// Content hash of the window set: geometry, origins and the values
    /// every window touches.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.lookback as u64).to_le_bytes());
        h.update((self.horizon as u64).to_le_bytes());
        h.update((self.channels() as u64).to_le_bytes());
        for &n in &self.origins {
            h.update((n as u64).to_le_bytes());
        }
        if let (Some(&lo), Some(&hi)) = (self.origins.first(), self.origins.last()) {
            for r in lo + 1 - self.lookback..hi + 1 + self.horizon {
                for v in self.values.row(r) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Windows for all three splits at a fixed (lookback, horizon).
#[derive(Clone, Debug)]
pub struct SplitWindows {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl SplitWindows {
    pub fn new(ds: &SeriesDataset, lookback: usize, horizon: usize) -> Result<Self> {
        let values = Arc::new(ds.values().clone());
        Ok(SplitWindows {
            train: WindowSet::from_shared(values.clone(), ds, lookback, horizon, SplitKind::Train)?,
            val: WindowSet::from_shared(values.clone(), ds, lookback, horizon, SplitKind::Val)?,
            test: WindowSet::from_shared(values, ds, lookback, horizon, SplitKind::Test)?,
        })
    }

    pub fn lookback(&self) -> usize {
        self.train.lookback()
    }

    pub fn horizon(&self) -> usize {
        self.train.horizon()
    }

    pub fn channels(&self) -> usize {
        self.train.channels()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for set in [&self.train, &self.val, &self.test] {
            h.update(set.fingerprint().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Materialized windows of one split.
pub fn windows(
    ds: &SeriesDataset,
    lookback: usize,
    horizon: usize,
    split: SplitKind,
) -> Result<Vec<WindowSample>> {
    Ok(WindowSet::new(ds, lookback, horizon, split)?.samples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, SynthSpec};
    use proptest::prelude::*;

    fn indexed(n: usize, d: usize, split: Split) -> SeriesDataset {
        // Value encodes its own (row, channel) so windows can be checked exactly.
        let values = Mat::from_vec(
            n,
            d,
            (0..n * d)
                .map(|k| (k / d) as f64 + 0.001 * (k % d) as f64)
                .collect(),
        )
        .unwrap();
        SeriesDataset::new(values, (0..d).map(|c| format!("c{c}")).collect(), split).unwrap()
    }

    #[test]
    fn single_train_window() {
        let ds = indexed(
            140,
            1,
            Split {
                train_end: 100,
                val_end: 120,
                test_end: 140,
            },
        );
        assert_eq!(windows(&ds, 96, 4, SplitKind::Train).unwrap().len(), 1);
    }

    #[test]
    fn case_study_geometry() {
        let ds = SynthSpec::default().generate().unwrap();
        let w = SplitWindows::new(&ds, 16, 32).unwrap();
        assert_eq!(w.train.len(), 2800 - 16 - 32 + 1);
        let s = w.test.sample(0);
        assert_eq!(s.history.shape(), (16, 2));
        assert_eq!(s.label.shape(), (32, 2));
    }

    #[test]
    fn too_short_split() {
        let ds = indexed(
            30,
            1,
            Split {
                train_end: 10,
                val_end: 20,
                test_end: 30,
            },
        );
        assert!(matches!(
            windows(&ds, 8, 4, SplitKind::Train),
            Err(Error::SplitTooShort { split: "train", .. })
        ));
        assert!(windows(&ds, 8, 11, SplitKind::Val).is_err());
    }

    #[test]
    fn batch_layout_matches_samples() {
        let ds = indexed(
            60,
            3,
            Split {
                train_end: 40,
                val_end: 50,
                test_end: 60,
            },
        );
        let set = WindowSet::new(&ds, 5, 4, SplitKind::Train).unwrap();
        let idx = [3, 0, 7];
        let x = set.inputs(&idx);
        let y = set.labels(&idx, 1..3).unwrap();
        for (b, &w) in idx.iter().enumerate() {
            let s = set.sample(w);
            for c in 0..3 {
                for t in 0..5 {
                    assert_eq!(x[(t, b * 3 + c)], s.history[(t, c)]);
                }
                for t in 0..2 {
                    assert_eq!(y[(t, b * 3 + c)], s.label[(t + 1, c)]);
                }
            }
        }
    }

    #[test]
    fn series_layout_matches_window_layout() {
        let ds = indexed(
            60,
            3,
            Split {
                train_end: 40,
                val_end: 50,
                test_end: 60,
            },
        );
        let set = WindowSet::new(&ds, 5, 4, SplitKind::Train).unwrap();
        assert_eq!(set.series_count(), set.len() * 3);
        let all_w: Vec<usize> = (0..set.len()).collect();
        let all_s: Vec<usize> = (0..set.series_count()).collect();
        assert_eq!(set.series_inputs(&all_s), set.inputs(&all_w));
        assert_eq!(
            set.series_labels(&all_s, 0..4).unwrap(),
            set.labels(&all_w, 0..4).unwrap()
        );
        // Series 7 is channel 1 of window 2.
        let x = set.series_inputs(&[7]);
        let s = set.sample(2);
        for t in 0..5 {
            assert_eq!(x[(t, 0)], s.history[(t, 1)]);
        }
        assert!(set.series_labels(&[0], 3..5).is_err());
    }

    proptest! {
        #[test]
        fn counts_and_reconstruction(
            n_train in 10usize..60, n_val in 3usize..30, n_test in 3usize..30,
            l in 1usize..12, t in 1usize..8,
        ) {
            let n = n_train + n_val + n_test;
            let split = Split { train_end: n_train, val_end: n_train + n_val, test_end: n };
            let ds = indexed(n, 2, split);
            for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
                let (start, end) = match kind {
                    SplitKind::Train => (0, n_train),
                    SplitKind::Val => (n_train, n_train + n_val),
                    SplitKind::Test => (n_train + n_val, n),
                };
                let expected = if kind == SplitKind::Train {
                    (end - start) as i64 - l as i64 - t as i64 + 1
                } else {
                    // History may reach back, bounded by the start of the series.
                    let first = (start as i64 - 1).max(l as i64 - 1);
                    end as i64 - t as i64 - first
                };
                match WindowSet::new(&ds, l, t, kind) {
                    Ok(set) => {
                        prop_assert_eq!(set.len() as i64, expected);
                        for w in set.samples() {
                            let o = w.origin;
                            prop_assert!(o + 1 >= start && o + t < end);
                            if kind == SplitKind::Test {
                                prop_assert!(o + 1 >= n_train + n_val);
                            }
                            for r in 0..l {
                                prop_assert_eq!(w.history[(r, 0)], (o + 1 - l + r) as f64);
                                prop_assert_eq!(w.history[(r, 1)], (o + 1 - l + r) as f64 + 0.001);
                            }
                            for r in 0..t {
                                prop_assert_eq!(w.label[(r, 1)], (o + 1 + r) as f64 + 0.001);
                            }
                        }
                    }
                    Err(_) => prop_assert!(expected <= 0),
                }
            }
        }
    }
}
