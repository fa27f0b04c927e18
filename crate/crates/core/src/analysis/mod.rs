//! Post-hoc analyses: the linear-head bottleneck, adapter parameter
//! budget, loss-variance decomposition, per-step representation probe and
//! the three-way forecasting comparison.

pub mod bottleneck;
pub mod compare;
pub mod params;
pub mod probe;
pub mod variance;

pub use bottleneck::{head_bottleneck, min_attainable_error, BottleneckReport, HeadBottleneck};
pub use compare::{paradigm_compare, summarize, CompareConfig, ComparisonReport, SeedSummary};
pub use params::{param_counts, ParamCount};
pub use probe::{per_step_probe, procrustes_disparity, ProbeConfig, ProbeReport};
pub use variance::{compare_variance, variance_report, VarianceComparison, VarianceReport};
