use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SeriesDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// One additive component of a synthetic series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Component {
    /// `amplitude · sin(2πt/period + phase + π·c/D)` for channel `c` of `D`.
    Sine {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `slope · t`, shared by all channels.
    Trend { slope: f64 },
    /// Stationary AR(1) with innovation standard deviation `amplitude`,
    /// drawn independently per channel.
    Ar1 { amplitude: f64, ar_coeff: f64 },
}

/// Recipe for a deterministic synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_points: usize,
    pub d_channels: usize,
    pub components: Vec<Component>,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub split: SplitSpec,
}

impl Default for SynthSpec {
    /// Two channels of two sines (periods 24 and 60) over a slight upward
    /// trend, with Gaussian noise of standard deviation 0.1.
    fn default() -> Self {
        SynthSpec {
            n_points: 4000,
            d_channels: 2,
            components: vec![
                Component::Sine {
                    amplitude: 1.0,
                    period: 24.0,
                    phase: 0.0,
                },
                Component::Sine {
                    amplitude: 0.5,
                    period: 60.0,
                    phase: 0.0,
                },
                Component::Trend { slope: 1e-5 },
            ],
            noise_std: 0.1,
            seed: 0,
            split: SplitSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.d_channels == 0 {
            return Err(Error::invalid(
                "synth spec",
                "n_points and d_channels must be positive",
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid(
                "synth spec",
                format!("noise_std {}", self.noise_std),
            ));
        }
        for c in &self.components {
            match *c {
                Component::Sine {
                    amplitude,
                    period,
                    phase,
                } => {
                    if !(period.is_finite() && period > 0.0) {
                        return Err(Error::invalid("synth spec", format!("period {period}")));
                    }
                    if !(amplitude.is_finite() && phase.is_finite()) {
                        return Err(Error::invalid("synth spec", "non-finite sine parameter"));
                    }
                }
                Component::Trend { slope } if !slope.is_finite() => {
                    return Err(Error::invalid("synth spec", "non-finite slope"));
                }
                Component::Ar1 {
                    amplitude,
                    ar_coeff,
                } => {
                    if ar_coeff.is_nan() || ar_coeff.abs() >= 1.0 {
                        return Err(Error::invalid("synth spec", format!("ar_coeff {ar_coeff}")));
                    }
                    if !(amplitude.is_finite() && amplitude >= 0.0) {
                        return Err(Error::invalid(
                            "synth spec",
                            format!("ar amplitude {amplitude}"),
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SeriesDataset> {
        self.validate()?;
        let (n, d) = (self.n_points, self.d_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut values = Mat::zeros(n, d);
        for c in 0..d {
            let offset = std::f64::consts::PI * c as f64 / d as f64;
            for comp in &self.components {
                match *comp {
                    Component::Sine {
                        amplitude,
                        period,
                        phase,
                    } => {
                        let w = std::f64::consts::TAU / period;
                        for t in 0..n {
                            values[(t, c)] += amplitude * (w * t as f64 + phase + offset).sin();
                        }
                    }
                    Component::Trend { slope } => {
                        for t in 0..n {
                            values[(t, c)] += slope * t as f64;
                        }
                    }
                    Component::Ar1 {
                        amplitude,
                        ar_coeff,
                    } => {
                        // Start from the stationary distribution.
                        let stationary = amplitude / (1.0 - ar_coeff * ar_coeff).sqrt();
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let mut x = stationary * z;
                        for t in 0..n {
                            if t > 0 {
                                let e: f64 = StandardNormal.sample(&mut rng);
                                x = ar_coeff * x + amplitude * e;
                            }
                            values[(t, c)] += x;
                        }
                    }
                }
            }
            if self.noise_std > 0.0 {
                for t in 0..n {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    values[(t, c)] += self.noise_std * e;
                }
            }
        }
        let names = (0..d).map(|c| format!("ch{c}")).collect();
        let split = self.split.resolve(n)?;
        SeriesDataset::new(values, names, split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_sine(n: usize, phase: f64) -> SynthSpec {
        SynthSpec {
            n_points: n,
            d_channels: 1,
            components: vec![Component::Sine {
                amplitude: 1.0,
                period: 24.0,
                phase,
            }],
            noise_std: 0.0,
            seed: 1,
            split: SplitSpec::default(),
        }
    }

    #[test]
    fn sine_is_periodic() {
        let ds = single_sine(48, 0.4).generate().unwrap();
        assert!((ds.values()[(0, 0)] - 0.4f64.sin()).abs() < 1e-12);
        assert!((ds.values()[(24, 0)] - ds.values()[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_series() {
        let spec = SynthSpec::default();
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
        let other = SynthSpec {
            seed: 1,
            ..SynthSpec::default()
        };
        assert_ne!(spec.generate().unwrap(), other.generate().unwrap());
    }

    #[test]
    fn ar1_autocorrelation_matches_theory() {
        let spec = SynthSpec {
            n_points: 10_000,
            d_channels: 1,
            components: vec![Component::Ar1 {
                amplitude: 1.0,
                ar_coeff: 0.9,
            }],
            noise_std: 0.1,
            seed: 5,
            split: SplitSpec::default(),
        };
        let ds = spec.generate().unwrap();
        let x = ds.values().col(0);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let rho = cov / var;
        assert!((0.85..=0.95).contains(&rho), "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = single_sine(10, 0.0);
        s.noise_std = -1.0;
        assert!(s.generate().is_err());
        let mut s = single_sine(10, 0.0);
        s.components = vec![Component::Sine {
            amplitude: 1.0,
            period: 0.0,
            phase: 0.0,
        }];
        assert!(s.generate().is_err());
        let mut s = single_sine(10, 0.0);
        s.components = vec![Component::Ar1 {
            amplitude: 1.0,
            ar_coeff: 1.0,
        }];
        assert!(s.generate().is_err());
    }

    #[test]
    fn default_split_is_70_10_20() {
        let ds = SynthSpec::default().generate().unwrap();
        let s = ds.split();
        assert_eq!((s.train_end, s.val_end, s.test_end), (2800, 3200, 4000));
    }
}
