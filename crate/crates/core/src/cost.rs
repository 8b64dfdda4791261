//! Static parameter and FLOPS accounting.
//!
//! Convention: one multiply-accumulate is one FLOP. A weight matrix applied
//! to `n` tokens costs `params × n`, once per application, so tied weights
//! are paid for at every slot that uses them. Each attention adds
//! `n_q·n_k·d` for scores and the same for the context product. The output
//! projection costs `n_tgt·d·V`. Biases, layer norm, softmax and the
//! embedding lookup are not counted.
//!
//! Parameters are reported two ways, both counting every group once and
//! excluding embeddings: weight matrices only (the closed forms `4d²`,
//! `2d·d_ffn`, ...) and the full store including biases and layer norms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::adapt::{la_flops_delta, la_param_delta, la_weight_delta};
use crate::config::{DecoderStyle, ModelConfig};
use crate::error::Result;
use crate::params::{store_layout, ModuleKind, Slot, Stack, TyingPlan};

pub const PARAM_BUDGET: u64 = 10_000_000;
pub const FLOPS_BUDGET: u64 = 2_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Encoder,
    VanillaDecoder,
    InterleavedDecoder,
}

/// Cost of one untied layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub weight_params: u64,
    pub full_params: u64,
    pub flops: u64,
}

fn attention_weights(d: u64) -> u64 {
    4 * d * d
}

fn ffn_weights(d: u64, inner: u64) -> u64 {
    2 * d * inner
}

/// Per-layer parameters (FFN shared once) and FLOPS at the given lengths.
pub fn layer_cost(kind: LayerKind, d: u64, ffn: u64, n_src: u64, n_tgt: u64) -> LayerCost {
    let attn_bias = 4 * d;
    let ffn_bias = ffn + d;
    let norm = 2 * d;
    match kind {
        LayerKind::Encoder => LayerCost {
            weight_params: attention_weights(d) + ffn_weights(d, ffn),
            full_params: attention_weights(d) + attn_bias + ffn_weights(d, ffn) + ffn_bias + 2 * norm,
            flops: attention_flops(d, n_src, n_src) + ffn_weights(d, ffn) * n_src,
        },
        LayerKind::VanillaDecoder | LayerKind::InterleavedDecoder => {
            let (norms, ffn_apps) = if kind == LayerKind::VanillaDecoder { (3, 1) } else { (4, 2) };
            LayerCost {
                weight_params: 2 * attention_weights(d) + ffn_weights(d, ffn),
                full_params: 2 * (attention_weights(d) + attn_bias) + ffn_weights(d, ffn) + ffn_bias + norms * norm,
                flops: attention_flops(d, n_tgt, n_tgt)
                    + attention_flops(d, n_tgt, n_src)
                    + ffn_apps * ffn_weights(d, ffn) * n_tgt,
            }
        }
    }
}

/// One attention application: Q/O projections over the queries, K/V over
/// the keys, plus score and context products.
fn attention_flops(d: u64, n_q: u64, n_k: u64) -> u64 {
    2 * d * d * n_q + 2 * d * d * n_k + 2 * n_q * n_k * d
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCost {
    pub group: String,
    pub params: u64,
    pub load: usize,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub value: u64,
    pub limit: u64,
    pub pass: bool,
    /// `limit - value`; negative when over budget.
    pub margin: i64,
}

impl Verdict {
    fn new(value: u64, limit: u64) -> Self {
        Verdict {
            value,
            limit,
            pass: value <= limit,
            margin: limit as i64 - value as i64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub params: Verdict,
    pub flops: Verdict,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub scheme: String,
    pub la: String,
    /// Weight matrices only, each group once, embeddings excluded.
    pub weight_params: u64,
    /// Full store, each group once, embeddings excluded.
    pub params_shared_once: u64,
    pub params_with_embeddings: u64,
    pub la_params: u64,
    pub flops: u64,
    pub n_src: u64,
    pub n_tgt: u64,
    pub vocab: u64,
    pub output_flops: u64,
    pub la_flops: u64,
    pub breakdown: Vec<ModuleCost>,
    pub budget: Budget,
}

/// Parameter counts of `config`: `(weight_params, full_params, embeddings)`.
pub fn count_params(plan: &TyingPlan, config: &ModelConfig) -> (u64, u64, u64) {
    let d = config.d_model as u64;
    let mut weights = 0u64;
    for class in plan.groups.values() {
        use crate::params::ShapeClass::*;
        weights += match *class {
            Attention { .. } => attention_weights(d),
            EncoderFfn { inner, .. } | DecoderFfn { inner, .. } => ffn_weights(d, inner as u64),
            EncoderLayer { inner, .. } => attention_weights(d) + ffn_weights(d, inner as u64),
            DecoderLayer { inner, .. } => 2 * attention_weights(d) + ffn_weights(d, inner as u64),
            _ => 0,
        };
    }
    weights += la_weight_delta(config, &config.la);
    let mut full = 0u64;
    let mut embed = 0u64;
    for (_, class) in store_layout(config, plan) {
        if class.is_embedding() {
            embed += class.param_count() as u64;
        } else {
            full += class.param_count() as u64;
        }
    }
    (weights, full, embed)
}

/// FLOPS of one slot application.
fn slot_flops(slot: Slot, config: &ModelConfig, n_src: u64, n_tgt: u64) -> u64 {
    let d = config.d_model as u64;
    match (slot.stack, slot.module) {
        (Stack::Encoder, ModuleKind::SelfAttn) => attention_flops(d, n_src, n_src),
        (Stack::Encoder, _) => ffn_weights(d, config.d_encffn as u64) * n_src,
        (Stack::Decoder, ModuleKind::SelfAttn) => attention_flops(d, n_tgt, n_tgt),
        (Stack::Decoder, ModuleKind::CrossAttn) => attention_flops(d, n_tgt, n_src),
        (Stack::Decoder, _) => ffn_weights(d, config.d_decffn as u64) * n_tgt,
    }
}

/// FLOPS of the output projection, factorized when `d_embed < d`.
pub fn output_flops(config: &ModelConfig, n_tgt: u64, vocab: u64) -> u64 {
    let d = config.d_model as u64;
    if config.factorized() {
        let e = config.d_embed as u64;
        n_tgt * (d * e + e * vocab)
    } else {
        n_tgt * d * vocab
    }
}

/// Total FLOPS for one sample of `n_src`/`n_tgt` tokens over `vocab` outputs.
pub fn estimate_flops(plan: &TyingPlan, config: &ModelConfig, n_src: u64, n_tgt: u64, vocab: u64) -> u64 {
    plan.bindings.keys().map(|&s| slot_flops(s, config, n_src, n_tgt)).sum::<u64>()
        + output_flops(config, n_tgt, vocab)
        + la_flops_delta(config, &config.la, n_src)
}

pub fn budget_check(params: u64, flops: u64) -> Budget {
    Budget {
        params: Verdict::new(params, PARAM_BUDGET),
        flops: Verdict::new(flops, FLOPS_BUDGET),
    }
}

/// Full report for `config` at the given operating point.
pub fn analyze(config: &ModelConfig, n_src: u64, n_tgt: u64, vocab: u64) -> Result<CostReport> {
    let plan = TyingPlan::build(config)?;
    Ok(analyze_plan(&plan, config, n_src, n_tgt, vocab))
}

pub fn analyze_plan(plan: &TyingPlan, config: &ModelConfig, n_src: u64, n_tgt: u64, vocab: u64) -> CostReport {
    let (weight_params, full, embed) = count_params(plan, config);
    let flops = estimate_flops(plan, config, n_src, n_tgt, vocab);
    let loads = plan.load_report();
    let mut per_group: BTreeMap<String, u64> = BTreeMap::new();
    for (slot, b) in &plan.bindings {
        *per_group.entry(b.group.clone()).or_default() += slot_flops(*slot, config, n_src, n_tgt);
    }
    let breakdown = plan
        .groups
        .iter()
        .map(|(name, class)| ModuleCost {
            group: name.clone(),
            params: class.param_count() as u64,
            load: loads.get(name).copied().unwrap_or(0),
            flops: per_group.get(name).copied().unwrap_or(0),
        })
        .collect();
    CostReport {
        scheme: plan.scheme.clone(),
        la: config.la.kind().to_string(),
        weight_params,
        params_shared_once: full,
        params_with_embeddings: full + embed,
        la_params: la_param_delta(config, &config.la),
        flops,
        n_src,
        n_tgt,
        vocab,
        output_flops: output_flops(config, n_tgt, vocab),
        la_flops: la_flops_delta(config, &config.la, n_src),
        breakdown,
        budget: budget_check(full, flops),
    }
}

/// `x` in units of `unit` rounded half-up to `decimals` places, as an
/// integer count of the last displayed digit.
pub fn round_units(x: u64, unit: u64, decimals: u32) -> u64 {
    let scale = 10u64.pow(decimals);
    (2 * x * scale + unit) / (2 * unit)
}

pub fn format_si(x: u64) -> String {
    let xf = x as f64;
    if xf >= 1e9 {
        format!("{:.3}G", xf / 1e9)
    } else if xf >= 1e6 {
        format!("{:.3}M", xf / 1e6)
    } else if xf >= 1e3 {
        format!("{:.1}K", xf / 1e3)
    } else {
        x.to_string()
    }
}

impl CostReport {
    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("scheme", self.scheme.clone());
        kv("la", self.la.clone());
        kv("weight_params", self.weight_params.to_string());
        kv("params_shared_once", self.params_shared_once.to_string());
        kv("params_with_embeddings", self.params_with_embeddings.to_string());
        kv("la_params", self.la_params.to_string());
        kv("flops", self.flops.to_string());
        kv("output_flops", self.output_flops.to_string());
        kv("la_flops", self.la_flops.to_string());
        kv("n_src", self.n_src.to_string());
        kv("n_tgt", self.n_tgt.to_string());
        kv("vocab", self.vocab.to_string());
        kv("budget.params_pass", self.budget.params.pass.to_string());
        kv("budget.params_margin", self.budget.params.margin.to_string());
        kv("budget.flops_pass", self.budget.flops.pass.to_string());
        kv("budget.flops_margin", self.budget.flops.margin.to_string());
        for m in &self.breakdown {
            kv(&format!("group.{}.params", m.group), m.params.to_string());
            kv(&format!("group.{}.load", m.group), m.load.to_string());
            kv(&format!("group.{}.flops", m.group), m.flops.to_string());
        }
        s
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scheme {}  la {}", self.scheme, self.la);
        let _ = writeln!(s, "{:<24} {:>12} {:>6} {:>14}", "group", "params", "load", "flops");
        for m in &self.breakdown {
            let _ = writeln!(s, "{:<24} {:>12} {:>6} {:>14}", m.group, m.params, m.load, m.flops);
        }
        let _ = writeln!(s, "weight params (shared once)    {:>14}  {}", self.weight_params, format_si(self.weight_params));
        let _ = writeln!(s, "store params (no embeddings)   {:>14}  {}", self.params_shared_once, format_si(self.params_shared_once));
        let _ = writeln!(s, "store params (with embeddings) {:>14}  {}", self.params_with_embeddings, format_si(self.params_with_embeddings));
        let _ = writeln!(s, "layer adaptation params        {:>14}", self.la_params);
        let _ = writeln!(
            s,
            "FLOPS (n_src={}, n_tgt={}, V={}) {:>14}  {}",
            self.n_src,
            self.n_tgt,
            self.vocab,
            self.flops,
            format_si(self.flops)
        );
        let verdict = |v: &Verdict| if v.pass { "pass" } else { "FAIL" };
        let _ = writeln!(s, "budget params <= {}: {} (margin {})", self.budget.params.limit, verdict(&self.budget.params), self.budget.params.margin);
        let _ = writeln!(s, "budget flops  <= {}: {} (margin {})", self.budget.flops.limit, verdict(&self.budget.flops), self.budget.flops.margin);
        s
    }
}

/// Per-layer costs of the layer kinds used by `config`.
pub fn layer_costs(config: &ModelConfig, n_src: u64, n_tgt: u64) -> Vec<(LayerKind, LayerCost)> {
    let d = config.d_model as u64;
    let dec = match config.decoder_style {
        DecoderStyle::Vanilla => LayerKind::VanillaDecoder,
        DecoderStyle::Interleaved => LayerKind::InterleavedDecoder,
    };
    vec![
        (LayerKind::Encoder, layer_cost(LayerKind::Encoder, d, config.d_encffn as u64, n_src, n_tgt)),
        (dec, layer_cost(dec, d, config.d_decffn as u64, n_src, n_tgt)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerAdapt;

    #[test]
    fn closed_form_layer_counts() {
        let enc = layer_cost(LayerKind::Encoder, 512, 2048, 30, 30);
        assert_eq!(enc.weight_params, 3_145_728);
        assert_eq!(enc.flops, 95_293_440);
        assert_eq!(layer_cost(LayerKind::Encoder, 384, 1536, 30, 30).weight_params, 1_769_472);
        assert_eq!(layer_cost(LayerKind::Encoder, 768, 3072, 30, 30).weight_params, 7_077_888);
        let van = layer_cost(LayerKind::VanillaDecoder, 512, 2048, 30, 30);
        assert_eq!(van.weight_params, 4_194_304);
        assert_eq!(van.flops, 127_672_320);
        let il = layer_cost(LayerKind::InterleavedDecoder, 512, 128, 30, 30);
        assert_eq!(il.weight_params, 2_228_224);
        assert_eq!(il.flops, 72_622_080);
    }

    #[test]
    fn model_totals() {
        let r = analyze(&ModelConfig::edgeformer(512), 30, 30, 32768).unwrap();
        assert_eq!(r.weight_params, 8_519_680);
        assert_eq!(r.flops, 12 * 95_293_440 + 2 * 72_622_080 + 30 * 512 * 32768);
        assert!(r.budget.params.pass && r.budget.flops.pass);

        let r = analyze(&ModelConfig::edgeformer(768), 30, 30, 32768).unwrap();
        assert_eq!(r.weight_params, 19_169_280);

        let r = analyze(&ModelConfig::universal(512, 12, 2), 30, 30, 32768).unwrap();
        assert_eq!(r.weight_params, 7_340_032);

        let r = analyze(&ModelConfig::transformer(512, 12, 2), 30, 30, 32768).unwrap();
        assert!(!r.budget.params.pass);
    }

    #[test]
    fn adapter_r64_breaks_budget() {
        let mut c = ModelConfig::edgeformer(512);
        c.la = LayerAdapt::adapter(64);
        let r = analyze(&c, 30, 30, 32768).unwrap();
        assert!(!r.budget.params.pass);
        c.la = LayerAdapt::adapter(32);
        assert!(analyze(&c, 30, 30, 32768).unwrap().budget.params.pass);
    }

    #[test]
    fn model_flops_equal_sum_of_layers() {
        for c in [ModelConfig::edgeformer(384), ModelConfig::transformer(768, 6, 6), ModelConfig::universal(512, 12, 2)] {
            let plan = TyingPlan::build(&c).unwrap();
            let layers = layer_costs(&c, 30, 30);
            let expect = c.encoder_layers as u64 * layers[0].1.flops
                + c.decoder_layers as u64 * layers[1].1.flops
                + 30 * c.d_model as u64 * 32768;
            assert_eq!(estimate_flops(&plan, &c, 30, 30, 32768), expect);
        }
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_units(8_550_000, 1_000_000, 1), 86);
        assert_eq!(round_units(8_549_999, 1_000_000, 1), 85);
        assert_eq!(round_units(44_000_000, 1_000_000, 0), 44);
    }

    #[test]
    fn key_value_output() {
        let r = analyze(&ModelConfig::edgeformer(512), 30, 30, 32768).unwrap();
        let kv = r.key_values();
        assert!(kv.contains("weight_params=8519680\n"));
        assert!(kv.contains("group.attn.1.load=4\n"));
        assert!(kv.lines().all(|l| l.split_once('=').is_some()));
    }
}
