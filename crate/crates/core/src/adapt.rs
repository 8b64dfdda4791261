//! Closed-form costs of layer adaptation. Adaptation applies to encoder
//! layers only; each layer owns its adaptation parameters.
//!
//! The forward rules live in the model:
//! - bias: every projection bias of layer `i` is the tied bias plus a
//!   layer-owned offset (zero at init);
//! - adapter: `x·W + s·(x·A)·B` on the query and value projections, with
//!   `A: d×r` random and `B: r×d` zero at init;
//! - prefix: `L` layer-owned rows of width `d` are prepended to the
//!   self-attention key/value input and pass through the tied projections.

use crate::config::{LayerAdapt, ModelConfig};

/// Parameters added by `la` on top of the unadapted model.
pub fn la_param_delta(config: &ModelConfig, la: &LayerAdapt) -> u64 {
    let d = config.d_model as u64;
    let layers = config.encoder_layers as u64;
    layers
        * match *la {
            LayerAdapt::None => 0,
            LayerAdapt::Bias => 5 * d + config.d_encffn as u64,
            LayerAdapt::Adapter { rank, .. } => 2 * 2 * d * rank as u64,
            LayerAdapt::Prefix { length } => length as u64 * d,
        }
}

/// Weight-matrix parameters added by `la` (bias offsets excluded).
pub fn la_weight_delta(config: &ModelConfig, la: &LayerAdapt) -> u64 {
    match la {
        LayerAdapt::Bias => 0,
        _ => la_param_delta(config, la),
    }
}

/// FLOPS added by `la` for a source of `n_src` tokens, one MAC per FLOP.
///
/// Adapters cost `2dr` per token per adapted projection. A prefix adds its
/// own key/value projections (`2d²·L`) and widens every score and context
/// product from `n_src` to `n_src + L` keys.
pub fn la_flops_delta(config: &ModelConfig, la: &LayerAdapt, n_src: u64) -> u64 {
    let d = config.d_model as u64;
    let layers = config.encoder_layers as u64;
    layers
        * match *la {
            LayerAdapt::None | LayerAdapt::Bias => 0,
            LayerAdapt::Adapter { rank, .. } => 2 * (2 * d * rank as u64) * n_src,
            LayerAdapt::Prefix { length } => {
                let l = length as u64;
                2 * d * d * l + 2 * n_src * l * d
            }
        }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{store_layout, TyingPlan};

    #[test]
    fn closed_forms() {
        let c = ModelConfig::edgeformer(512);
        assert_eq!(la_param_delta(&c, &LayerAdapt::adapter(32)), 786_432);
        assert_eq!(la_param_delta(&c, &LayerAdapt::Prefix { length: 8 }), 49_152);
        assert_eq!(la_param_delta(&c, &LayerAdapt::None), 0);
        assert_eq!(la_param_delta(&c, &LayerAdapt::adapter(64)), 1_572_864);
    }

    #[test]
    fn deltas_match_layout() {
        for la in [
            LayerAdapt::Bias,
            LayerAdapt::adapter(8),
            LayerAdapt::Prefix { length: 3 },
        ] {
            let mut c = ModelConfig::edgeformer(64);
            let plan = TyingPlan::build(&c).unwrap();
            let base: usize = store_layout(&c, &plan).iter().map(|(_, k)| k.param_count()).sum();
            c.la = la.clone();
            let adapted: usize = store_layout(&c, &plan).iter().map(|(_, k)| k.param_count()).sum();
            assert_eq!((adapted - base) as u64, la_param_delta(&c, &la), "{la:?}");
            // no adaptation group is attached to a decoder slot
            assert!(store_layout(&c, &plan)
                .iter()
                .all(|(n, k)| !(n.starts_with("dec.") && !matches!(k, crate::params::ShapeClass::Norm { .. }))));
        }
    }
}
