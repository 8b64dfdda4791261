//! Architecture configuration, layer-adaptation settings and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderStyle {
    /// self-attn → cross-attn → FFN
    Vanilla,
    /// self-attn → light FFN → cross-attn → light FFN, both FFNs one group
    Interleaved,
}

/// Explicit slot→group bindings. Lists are indexed by layer (first entry is
/// layer 1). Groups are created from the names used; a name may be reused
/// across encoder and decoder attention slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomTying {
    pub encoder_attn: Vec<String>,
    pub encoder_ffn: Vec<String>,
    pub decoder_self_attn: Vec<String>,
    pub decoder_cross_attn: Vec<String>,
    pub decoder_ffn: Vec<String>,
    /// Second FFN application of interleaved layers; defaults to `decoder_ffn`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_ffn_post: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase", deny_unknown_fields)]
pub enum TyingScheme {
    /// One group per slot.
    #[default]
    Full,
    /// One encoder-layer group and one decoder-layer group.
    Universal,
    /// Encoder-favored, load-balanced tying of the 12+2 interleaved model.
    Edgeformer,
    Custom(CustomTying),
}

impl TyingScheme {
    pub fn name(&self) -> &'static str {
        match self {
            TyingScheme::Full => "full",
            TyingScheme::Universal => "universal",
            TyingScheme::Edgeformer => "edgeformer",
            TyingScheme::Custom(_) => "custom",
        }
    }
}

fn default_alpha() -> f64 {
    1.0
}

/// Per-layer adaptation of tied encoder layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerAdapt {
    #[default]
    None,
    /// Untied per-layer biases on every projection of each encoder layer.
    Bias,
    /// Low-rank update on the query and value projections.
    Adapter {
        rank: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
        /// Use `alpha / rank` as the scaling instead of `alpha`.
        #[serde(default)]
        rank_normalized: bool,
    },
    /// Learnable rows prepended to the self-attention keys and values.
    Prefix { length: usize },
}

impl LayerAdapt {
    pub fn adapter(rank: usize) -> Self {
        LayerAdapt::Adapter {
            rank,
            alpha: 1.0,
            rank_normalized: false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerAdapt::None => "none",
            LayerAdapt::Bias => "bias",
            LayerAdapt::Adapter { .. } => "adapter",
            LayerAdapt::Prefix { .. } => "prefix",
        }
    }

    pub fn adapter_scaling(&self) -> Option<f64> {
        match *self {
            LayerAdapt::Adapter {
                rank,
                alpha,
                rank_normalized,
            } => Some(if rank_normalized { alpha / rank as f64 } else { alpha }),
            _ => None,
        }
    }

    pub fn prefix_len(&self) -> usize {
        match *self {
            LayerAdapt::Prefix { length } => length,
            _ => 0,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_encffn: usize,
    pub d_decffn: usize,
    pub decoder_style: DecoderStyle,
    pub heads: usize,
    pub vocab_size: usize,
    /// Embedding width; factorized through a learned projection when below
    /// `d_model`.
    pub d_embed: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Output projection reuses the embedding table.
    #[serde(default = "default_true")]
    pub tie_output: bool,
    #[serde(default)]
    pub la: LayerAdapt,
    #[serde(default)]
    pub tying: TyingScheme,
}

impl ModelConfig {
    /// Standard Transformer with a vanilla decoder and `d_ffn = 4d`.
    pub fn transformer(d: usize, encoder_layers: usize, decoder_layers: usize) -> Self {
        ModelConfig {
            d_model: d,
            encoder_layers,
            decoder_layers,
            d_encffn: 4 * d,
            d_decffn: 4 * d,
            decoder_style: DecoderStyle::Vanilla,
            heads: (d / 64).max(1),
            vocab_size: 32768,
            d_embed: d,
            max_len: 1024,
            dropout: 0.1,
            activation: Activation::Relu,
            tie_output: true,
            la: LayerAdapt::None,
            tying: TyingScheme::Full,
        }
    }

    pub fn universal(d: usize, encoder_layers: usize, decoder_layers: usize) -> Self {
        ModelConfig {
            tying: TyingScheme::Universal,
            ..Self::transformer(d, encoder_layers, decoder_layers)
        }
    }

    /// 12-layer encoder, 2 interleaved decoder layers with `d_decffn = d/4`.
    pub fn edgeformer(d: usize) -> Self {
        ModelConfig {
            d_decffn: d / 4,
            decoder_style: DecoderStyle::Interleaved,
            tying: TyingScheme::Edgeformer,
            ..Self::transformer(d, 12, 2)
        }
    }

    /// Resolve a named preset.
    ///
    /// Grammar: `edgeformer-<d>[-bias|-adapter<r>|-prefix<L>]`,
    /// `ut-<M>+<N>-<d>`, `full-<M>+<N>-<d>`, and
    /// `table3-<load>` (e.g. `table3-1-11`) for the encoder-FFN load variants.
    pub fn preset(name: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown preset `{name}`"));
        if let Some(load) = name.strip_prefix("table3-") {
            return table3_preset(load).ok_or_else(bad);
        }
        if let Some(rest) = name.strip_prefix("edgeformer-") {
            let mut parts = rest.splitn(2, '-');
            let d: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let mut cfg = Self::edgeformer(d);
            if let Some(la) = parts.next() {
                cfg.la = if la == "bias" {
                    LayerAdapt::Bias
                } else if let Some(r) = la.strip_prefix("adapter") {
                    LayerAdapt::adapter(r.parse().map_err(|_| bad())?)
                } else if let Some(l) = la.strip_prefix("prefix") {
                    LayerAdapt::Prefix {
                        length: l.parse().map_err(|_| bad())?,
                    }
                } else {
                    return Err(bad());
                };
            }
            cfg.validate()?;
            return Ok(cfg);
        }
        let (kind, rest) = name.split_once('-').ok_or_else(bad)?;
        let (depths, d) = rest.rsplit_once('-').ok_or_else(bad)?;
        let (m, n) = depths.split_once('+').ok_or_else(bad)?;
        let (m, n, d): (usize, usize, usize) = (
            m.parse().map_err(|_| bad())?,
            n.parse().map_err(|_| bad())?,
            d.parse().map_err(|_| bad())?,
        );
        let cfg = match kind {
            "ut" => Self::universal(d, m, n),
            "full" => Self::transformer(d, m, n),
            _ => return Err(bad()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn factorized(&self) -> bool {
        self.d_embed < self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return err("d_model and layer depths must be at least 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_encffn == 0 || self.d_decffn == 0 {
            return err("FFN widths must be at least 1".into());
        }
        if self.decoder_style == DecoderStyle::Interleaved && self.d_decffn >= self.d_model {
            return err(format!(
                "interleaved decoder requires d_decffn < d_model (got {} >= {})",
                self.d_decffn, self.d_model
            ));
        }
        if self.d_embed == 0 || self.d_embed > self.d_model {
            return err(format!("d_embed must be in 1..={}, got {}", self.d_model, self.d_embed));
        }
        if self.vocab_size < 2 {
            return err("vocab_size must be at least 2".into());
        }
        if self.max_len == 0 {
            return err("max_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.la {
            LayerAdapt::Adapter { rank, .. } if rank == 0 || rank >= self.d_model => {
                return err(format!("adapter rank must satisfy 1 <= r < d, got r={rank}, d={}", self.d_model));
            }
            LayerAdapt::Prefix { length: 0 } => {
                return err("prefix length must be at least 1".into());
            }
            _ => {}
        }
        Ok(())
    }
}

fn table3_preset(load: &str) -> Option<ModelConfig> {
    let d = 512;
    let (ffn_dim, pattern): (usize, Vec<usize>) = match load {
        "6-6" => (2048, (0..12).map(|i| i % 2).collect()),
        "4-4-4" => (1536, (0..12).map(|i| i % 3).collect()),
        "3-3-3-3" => (1024, (0..12).map(|i| i % 4).collect()),
        "1-11" => (2048, (0..12).map(|i| usize::from(i > 0)).collect()),
        "11-1" => (2048, (0..12).map(|i| usize::from(i == 11)).collect()),
        _ => return None,
    };
    let names = |prefix: &str, ids: &[usize]| -> Vec<String> {
        ids.iter().map(|i| format!("{prefix}.{}", i + 1)).collect()
    };
    let attn: Vec<usize> = (0..12).map(|i| i % 4).collect();
    let custom = CustomTying {
        encoder_attn: names("attn", &attn),
        encoder_ffn: names("enc_ffn", &pattern),
        decoder_self_attn: vec!["attn.1".into(), "attn.3".into()],
        decoder_cross_attn: vec!["attn.2".into(), "attn.4".into()],
        decoder_ffn: vec!["dec_ffn".into(), "dec_ffn".into()],
        decoder_ffn_post: None,
    };
    Some(ModelConfig {
        d_encffn: ffn_dim,
        tying: TyingScheme::Custom(custom),
        ..ModelConfig::edgeformer(d)
    })
}
