//! Parameter budget of the adapter relative to a transformer backbone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountInputs {
    pub n_layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub rank: u64,
    pub experts: u64,
    pub segments: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub n_mola: u64,
    pub n_backbone: u64,
    /// `n_mola / n_backbone`.
    pub ratio: f64,
    pub inputs: CountInputs,
}

/// Adapter: every layer gets two adapted matrices (d_m→d_ff and
/// d_ff→d_m), each with `P` rank-`r` pairs, plus `P·K` mixing weights:
/// `N_l · 2 · ((d_m·r + r·d_ff)·P + P·K)`.
///
/// Backbone: `N_l · (4·d_m² + 2·d_m·d_ff + 4·d_m)`.
pub fn param_counts(
    n_layers: u64,
    d_model: u64,
    d_ff: u64,
    rank: u64,
    experts: u64,
    segments: u64,
) -> Result<ParamCount> {
    let inputs = CountInputs {
        n_layers,
        d_model,
        d_ff,
        rank,
        experts,
        segments,
    };
    let overflow = || Error::invalid("parameter count", format!("{inputs:?} overflows u64"));
    let mul = |a: u64, b: u64| a.checked_mul(b).ok_or_else(overflow);
    let add = |a: u64, b: u64| a.checked_add(b).ok_or_else(overflow);

    let per_pair = add(mul(d_model, rank)?, mul(rank, d_ff)?)?;
    let per_matrix = add(mul(per_pair, experts)?, mul(experts, segments)?)?;
    let n_mola = mul(mul(n_layers, 2)?, per_matrix)?;

    let attn = mul(4, mul(d_model, d_model)?)?;
    let ffn = mul(2, mul(d_model, d_ff)?)?;
    let norms = mul(4, d_model)?;
    let n_backbone = mul(n_layers, add(add(attn, ffn)?, norms)?)?;
    if n_backbone == 0 {
        return Err(Error::invalid(
            "parameter count",
            "backbone has no parameters",
        ));
    }
    Ok(ParamCount {
        n_mola,
        n_backbone,
        ratio: n_mola as f64 / n_backbone as f64,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_budget() {
        let c = param_counts(3, 512, 1024, 8, 4, 6).unwrap();
        // Hand-expanded: per layer 2·((4096 + 8192)·4 + 24) = 98352.
        assert_eq!(c.n_mola, 3 * 98_352);
        // 4·512² + 2·512·1024 + 4·512 = 1048576 + 1048576 + 2048.
        assert_eq!(c.n_backbone, 3 * 2_099_200);
        assert!((c.ratio - 98_352.0 / 2_099_200.0).abs() < 1e-15);
        assert!((c.ratio - 0.047).abs() <= 0.001);
    }

    #[test]
    fn rank_zero_leaves_only_mixing_weights() {
        let c = param_counts(2, 64, 128, 0, 4, 6).unwrap();
        assert_eq!(c.n_mola, 2 * 2 * 4 * 6);
    }

    #[test]
    fn empty_backbone_is_rejected() {
        assert!(param_counts(0, 512, 1024, 8, 4, 6).is_err());
        assert!(param_counts(2, 0, 0, 8, 4, 6).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        assert!(param_counts(u64::MAX, u64::MAX, 1, 1, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn mola_count_is_linear_in_experts(
            nl in 1u64..8, dm in 1u64..1024, dff in 1u64..4096,
            r in 0u64..64, p in 1u64..16, k in 1u64..12,
        ) {
            let one = param_counts(nl, dm, dff, r, p, k).unwrap();
            let two = param_counts(nl, dm, dff, r, 2 * p, k).unwrap();
            prop_assert_eq!(two.n_mola, 2 * one.n_mola);
            prop_assert_eq!(two.n_backbone, one.n_backbone);
            prop_assert_eq!(one.ratio, one.n_mola as f64 / one.n_backbone as f64);
        }
    }
}
