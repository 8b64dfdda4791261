//! Parameter groups, tying plans and the parameter store.
//!
//! A [`TyingPlan`] maps every module slot of the architecture (encoder layer
//! `i` self-attention, decoder layer `j` cross-attention, ...) onto a named
//! parameter group. The [`ParamStore`] owns each group exactly once, so all
//! slots bound to a group read the same arrays and their gradients add up.
//!
//! Layer-local arrays (layer norms, layer-adaptation parameters) live in their
//! own groups and are never shared.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CustomTying, DecoderStyle, LayerAdapt, ModelConfig, TyingScheme};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    SelfAttn,
    CrossAttn,
    Ffn,
    /// Second FFN application of an interleaved decoder layer.
    FfnPost,
}

/// One module application site in the architecture. Layers are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    pub stack: Stack,
    pub layer: usize,
    pub module: ModuleKind,
}

impl Slot {
    pub fn new(stack: Stack, layer: usize, module: ModuleKind) -> Self {
        Slot { stack, layer, module }
    }

    pub fn enc(layer: usize, module: ModuleKind) -> Self {
        Slot::new(Stack::Encoder, layer, module)
    }

    pub fn dec(layer: usize, module: ModuleKind) -> Self {
        Slot::new(Stack::Decoder, layer, module)
    }

    pub fn is_attention(&self) -> bool {
        matches!(self.module, ModuleKind::SelfAttn | ModuleKind::CrossAttn)
    }

    /// All slots of the configured architecture, in forward order.
    pub fn all(config: &ModelConfig) -> Vec<Slot> {
        let mut slots = Vec::new();
        for i in 1..=config.encoder_layers {
            slots.push(Slot::enc(i, ModuleKind::SelfAttn));
            slots.push(Slot::enc(i, ModuleKind::Ffn));
        }
        for j in 1..=config.decoder_layers {
            slots.push(Slot::dec(j, ModuleKind::SelfAttn));
            slots.push(Slot::dec(j, ModuleKind::CrossAttn));
            slots.push(Slot::dec(j, ModuleKind::Ffn));
            if config.decoder_style == DecoderStyle::Interleaved {
                slots.push(Slot::dec(j, ModuleKind::FfnPost));
            }
        }
        slots
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stack = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        let module = match self.module {
            ModuleKind::SelfAttn => "self_attn",
            ModuleKind::CrossAttn => "cross_attn",
            ModuleKind::Ffn => "ffn",
            ModuleKind::FfnPost => "ffn_post",
        };
        write!(f, "{stack}.{}.{module}", self.layer)
    }
}

impl FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Corrupt(format!("malformed slot `{s}`"));
        let mut it = s.splitn(3, '.');
        let stack = match it.next() {
            Some("enc") => Stack::Encoder,
            Some("dec") => Stack::Decoder,
            _ => return Err(bad()),
        };
        let layer = it.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?;
        let module = match it.next() {
            Some("self_attn") => ModuleKind::SelfAttn,
            Some("cross_attn") => ModuleKind::CrossAttn,
            Some("ffn") => ModuleKind::Ffn,
            Some("ffn_post") => ModuleKind::FfnPost,
            _ => return Err(bad()),
        };
        Ok(Slot { stack, layer, module })
    }
}

/// Sub-block of a compound (whole-layer) group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Whole,
    SelfAttn,
    CrossAttn,
    Ffn,
}

impl Part {
    pub fn prefix(self) -> &'static str {
        match self {
            Part::Whole => "",
            Part::SelfAttn => "self_attn.",
            Part::CrossAttn => "cross_attn.",
            Part::Ffn => "ffn.",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Binding {
    pub group: String,
    pub part: Part,
}

impl Binding {
    pub fn whole(group: impl Into<String>) -> Self {
        Binding {
            group: group.into(),
            part: Part::Whole,
        }
    }

    /// Store key of tensor `name` within the bound module.
    pub fn key(&self, name: &str) -> String {
        format!("{}/{}{}", self.group, self.part.prefix(), name)
    }
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.part {
            Part::Whole => write!(f, "{}", self.group),
            p => write!(f, "{}:{}", self.group, p.prefix().trim_end_matches('.')),
        }
    }
}

/// Which layer-norm sites a norm group carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSites {
    EncoderLayer,
    VanillaDecoder,
    InterleavedDecoder,
    Final,
}

impl NormSites {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            NormSites::EncoderLayer => &["attn", "ffn"],
            NormSites::VanillaDecoder => &["self_attn", "cross_attn", "ffn"],
            NormSites::InterleavedDecoder => &["self_attn", "ffn", "cross_attn", "ffn_post"],
            NormSites::Final => &["final"],
        }
    }
}

/// Shape class of a parameter group; fixes its tensor inventory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Attention { d: usize },
    EncoderFfn { d: usize, inner: usize },
    DecoderFfn { d: usize, inner: usize },
    EncoderLayer { d: usize, inner: usize },
    DecoderLayer { d: usize, inner: usize },
    Embedding { vocab: usize, d_embed: usize, d_model: usize },
    Norm { d: usize, sites: NormSites },
    Adapter { d: usize, rank: usize },
    Prefix { len: usize, d: usize },
    Bias { d: usize, inner: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in ±√(3/fan_in): zero mean, variance 1/fan_in.
    FanIn(usize),
    Zeros,
    Ones,
    /// Uniform with unit variance.
    Unit,
}

pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> TensorSpec {
    TensorSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn attention_specs(prefix: &str, d: usize, out: &mut Vec<TensorSpec>) {
    for p in ["q", "k", "v", "o"] {
        out.push(spec(format!("{prefix}w{p}"), &[d, d], Init::FanIn(d)));
        out.push(spec(format!("{prefix}b{p}"), &[d], Init::Zeros));
    }
}

fn ffn_specs(prefix: &str, d: usize, inner: usize, out: &mut Vec<TensorSpec>) {
    out.push(spec(format!("{prefix}w1"), &[d, inner], Init::FanIn(d)));
    out.push(spec(format!("{prefix}b1"), &[inner], Init::Zeros));
    out.push(spec(format!("{prefix}w2"), &[inner, d], Init::FanIn(inner)));
    out.push(spec(format!("{prefix}b2"), &[d], Init::Zeros));
}

impl ShapeClass {
    pub fn tensors(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        match *self {
            ShapeClass::Attention { d } => attention_specs("", d, &mut out),
            ShapeClass::EncoderFfn { d, inner } | ShapeClass::DecoderFfn { d, inner } => {
                ffn_specs("", d, inner, &mut out)
            }
            ShapeClass::EncoderLayer { d, inner } => {
                attention_specs(Part::SelfAttn.prefix(), d, &mut out);
                ffn_specs(Part::Ffn.prefix(), d, inner, &mut out);
            }
            ShapeClass::DecoderLayer { d, inner } => {
                attention_specs(Part::SelfAttn.prefix(), d, &mut out);
                attention_specs(Part::CrossAttn.prefix(), d, &mut out);
                ffn_specs(Part::Ffn.prefix(), d, inner, &mut out);
            }
            ShapeClass::Embedding {
                vocab,
                d_embed,
                d_model,
            } => {
                out.push(spec("table", &[vocab, d_embed], Init::FanIn(d_embed)));
                if d_embed < d_model {
                    out.push(spec("proj", &[d_embed, d_model], Init::FanIn(d_embed)));
                }
            }
            ShapeClass::Norm { d, sites } => {
                for site in sites.names() {
                    out.push(spec(format!("{site}.gain"), &[d], Init::Ones));
                    out.push(spec(format!("{site}.bias"), &[d], Init::Zeros));
                }
            }
            ShapeClass::Adapter { d, rank } => {
                for p in ["q", "v"] {
                    out.push(spec(format!("a_{p}"), &[d, rank], Init::FanIn(d)));
                    out.push(spec(format!("b_{p}"), &[rank, d], Init::Zeros));
                }
            }
            ShapeClass::Prefix { len, d } => out.push(spec("tokens", &[len, d], Init::Unit)),
            ShapeClass::Bias { d, inner } => {
                for p in ["q", "k", "v", "o"] {
                    out.push(spec(format!("b{p}"), &[d], Init::Zeros));
                }
                out.push(spec("b1", &[inner], Init::Zeros));
                out.push(spec("b2", &[d], Init::Zeros));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors()
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }

    pub fn is_embedding(&self) -> bool {
        matches!(self, ShapeClass::Embedding { .. })
    }

    /// Groups whose binding is decided by the tying plan.
    pub fn is_module(&self) -> bool {
        matches!(
            self,
            ShapeClass::Attention { .. }
                | ShapeClass::EncoderFfn { .. }
                | ShapeClass::DecoderFfn { .. }
                | ShapeClass::EncoderLayer { .. }
                | ShapeClass::DecoderLayer { .. }
        )
    }

    pub fn tag(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ShapeClass::Attention { d } => write!(f, "attention(d={d})"),
            ShapeClass::EncoderFfn { d, inner } => write!(f, "encoder_ffn(d={d},inner={inner})"),
            ShapeClass::DecoderFfn { d, inner } => write!(f, "decoder_ffn(d={d},inner={inner})"),
            ShapeClass::EncoderLayer { d, inner } => write!(f, "encoder_layer(d={d},inner={inner})"),
            ShapeClass::DecoderLayer { d, inner } => write!(f, "decoder_layer(d={d},inner={inner})"),
            ShapeClass::Embedding {
                vocab,
                d_embed,
                d_model,
            } => write!(f, "embedding(vocab={vocab},d_embed={d_embed},d={d_model})"),
            ShapeClass::Norm { d, sites } => write!(f, "norm(d={d},sites={})", sites.names().join("+")),
            ShapeClass::Adapter { d, rank } => write!(f, "adapter(d={d},r={rank})"),
            ShapeClass::Prefix { len, d } => write!(f, "prefix(L={len},d={d})"),
            ShapeClass::Bias { d, inner } => write!(f, "bias(d={d},inner={inner})"),
        }
    }
}

/// Declarative slot→group map plus the inventory of module groups.
#[derive(Clone, Debug, PartialEq)]
pub struct TyingPlan {
    pub scheme: String,
    pub groups: BTreeMap<String, ShapeClass>,
    pub bindings: BTreeMap<Slot, Binding>,
}

impl TyingPlan {
    /// Build the plan for `config.tying`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Self::build_scheme(&config.tying, config)
    }

    pub fn build_scheme(scheme: &TyingScheme, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut plan = TyingPlan {
            scheme: scheme.name().to_string(),
            groups: BTreeMap::new(),
            bindings: BTreeMap::new(),
        };
        let d = config.d_model;
        let attn = ShapeClass::Attention { d };
        let enc_ffn = ShapeClass::EncoderFfn {
            d,
            inner: config.d_encffn,
        };
        let dec_ffn = ShapeClass::DecoderFfn {
            d,
            inner: config.d_decffn,
        };
        match scheme {
            TyingScheme::Full => {
                for slot in Slot::all(config) {
                    let (name, class) = match (slot.stack, slot.module) {
                        (_, ModuleKind::SelfAttn | ModuleKind::CrossAttn) => (slot.to_string(), attn),
                        (Stack::Encoder, _) => (slot.to_string(), enc_ffn),
                        (Stack::Decoder, _) => (format!("dec.{}.ffn", slot.layer), dec_ffn),
                    };
                    plan.bind(slot, Binding::whole(name.clone()), class);
                }
            }
            TyingScheme::Universal => {
                plan.groups.insert("enc_layer".into(), ShapeClass::EncoderLayer { d, inner: config.d_encffn });
                plan.groups.insert("dec_layer".into(), ShapeClass::DecoderLayer { d, inner: config.d_decffn });
                for slot in Slot::all(config) {
                    let (group, part) = match (slot.stack, slot.module) {
                        (Stack::Encoder, ModuleKind::SelfAttn) => ("enc_layer", Part::SelfAttn),
                        (Stack::Encoder, _) => ("enc_layer", Part::Ffn),
                        (Stack::Decoder, ModuleKind::SelfAttn) => ("dec_layer", Part::SelfAttn),
                        (Stack::Decoder, ModuleKind::CrossAttn) => ("dec_layer", Part::CrossAttn),
                        (Stack::Decoder, _) => ("dec_layer", Part::Ffn),
                    };
                    plan.bindings.insert(
                        slot,
                        Binding {
                            group: group.into(),
                            part,
                        },
                    );
                }
            }
            TyingScheme::Edgeformer => {
                check_edgeformer_shape(config)?;
                for i in 1..=config.encoder_layers {
                    // attention period 4, encoder FFN period 2
                    plan.bind(Slot::enc(i, ModuleKind::SelfAttn), Binding::whole(format!("attn.{}", (i - 1) % 4 + 1)), attn);
                    plan.bind(Slot::enc(i, ModuleKind::Ffn), Binding::whole(format!("enc_ffn.{}", (i - 1) % 2 + 1)), enc_ffn);
                }
                for j in 1..=config.decoder_layers {
                    let self_src = plan.bindings[&Slot::enc(2 * j - 1, ModuleKind::SelfAttn)].clone();
                    let cross_src = plan.bindings[&Slot::enc(2 * j, ModuleKind::SelfAttn)].clone();
                    plan.bind(Slot::dec(j, ModuleKind::SelfAttn), self_src, attn);
                    plan.bind(Slot::dec(j, ModuleKind::CrossAttn), cross_src, attn);
                    plan.bind(Slot::dec(j, ModuleKind::Ffn), Binding::whole("dec_ffn"), dec_ffn);
                    plan.bind(Slot::dec(j, ModuleKind::FfnPost), Binding::whole("dec_ffn"), dec_ffn);
                }
            }
            TyingScheme::Custom(custom) => plan.bind_custom(custom, config, attn, enc_ffn, dec_ffn)?,
        }
        plan.validate(config)?;
        Ok(plan)
    }

    fn bind(&mut self, slot: Slot, binding: Binding, class: ShapeClass) {
        self.groups.insert(binding.group.clone(), class);
        self.bindings.insert(slot, binding);
    }

    fn bind_custom(
        &mut self,
        custom: &CustomTying,
        config: &ModelConfig,
        attn: ShapeClass,
        enc_ffn: ShapeClass,
        dec_ffn: ShapeClass,
    ) -> Result<()> {
        let interleaved = config.decoder_style == DecoderStyle::Interleaved;
        let lists: Vec<(&Vec<String>, Stack, ModuleKind, ShapeClass, usize)> = {
            let mut v = vec![
                (&custom.encoder_attn, Stack::Encoder, ModuleKind::SelfAttn, attn, config.encoder_layers),
                (&custom.encoder_ffn, Stack::Encoder, ModuleKind::Ffn, enc_ffn, config.encoder_layers),
                (&custom.decoder_self_attn, Stack::Decoder, ModuleKind::SelfAttn, attn, config.decoder_layers),
                (&custom.decoder_cross_attn, Stack::Decoder, ModuleKind::CrossAttn, attn, config.decoder_layers),
                (&custom.decoder_ffn, Stack::Decoder, ModuleKind::Ffn, dec_ffn, config.decoder_layers),
            ];
            if interleaved {
                let post = custom.decoder_ffn_post.as_ref().unwrap_or(&custom.decoder_ffn);
                v.push((post, Stack::Decoder, ModuleKind::FfnPost, dec_ffn, config.decoder_layers));
            } else if custom.decoder_ffn_post.is_some() {
                return Err(Error::Config("decoder_ffn_post given for a vanilla decoder".into()));
            }
            v
        };
        for (names, stack, module, class, depth) in lists {
            if names.len() != depth {
                let layer = names.len().min(depth) + 1;
                return Err(Error::Config(format!(
                    "custom tying lists {} bindings for {depth} layers; offending slot {}",
                    names.len(),
                    Slot::new(stack, layer, module)
                )));
            }
            for (i, name) in names.iter().enumerate() {
                let slot = Slot::new(stack, i + 1, module);
                if let Some(existing) = self.groups.get(name) {
                    if *existing != class {
                        return Err(Error::Config(format!(
                            "slot {slot} binds group `{name}` of class {existing}, expected {class}"
                        )));
                    }
                }
                self.bind(slot, Binding::whole(name.clone()), class);
            }
        }
        Ok(())
    }

    /// Every slot bound exactly once to an existing, shape-compatible group;
    /// both FFN applications of an interleaved layer share one group.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let slots = Slot::all(config);
        for slot in &slots {
            let b = self
                .bindings
                .get(slot)
                .ok_or_else(|| Error::Config(format!("slot {slot} is not bound to any group")))?;
            let class = self
                .groups
                .get(&b.group)
                .ok_or_else(|| Error::Config(format!("slot {slot} binds unknown group `{}`", b.group)))?;
            let d = config.d_model;
            let expected_inner = match slot.stack {
                Stack::Encoder => config.d_encffn,
                Stack::Decoder => config.d_decffn,
            };
            let ok = match (slot.is_attention(), class, b.part) {
                (true, ShapeClass::Attention { d: gd }, Part::Whole) => *gd == d,
                (true, ShapeClass::EncoderLayer { d: gd, .. }, Part::SelfAttn) => *gd == d,
                (true, ShapeClass::DecoderLayer { d: gd, .. }, Part::SelfAttn | Part::CrossAttn) => *gd == d,
                (false, ShapeClass::EncoderFfn { d: gd, inner }, Part::Whole) => {
                    slot.stack == Stack::Encoder && *gd == d && *inner == expected_inner
                }
                (false, ShapeClass::DecoderFfn { d: gd, inner }, Part::Whole) => {
                    slot.stack == Stack::Decoder && *gd == d && *inner == expected_inner
                }
                (false, ShapeClass::EncoderLayer { d: gd, inner }, Part::Ffn) => {
                    slot.stack == Stack::Encoder && *gd == d && *inner == expected_inner
                }
                (false, ShapeClass::DecoderLayer { d: gd, inner }, Part::Ffn) => {
                    slot.stack == Stack::Decoder && *gd == d && *inner == expected_inner
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!("slot {slot} cannot bind {b} of class {class}")));
            }
        }
        if let Some(extra) = self.bindings.keys().find(|s| !slots.contains(s)) {
            return Err(Error::Config(format!("binding for slot {extra} which the architecture does not have")));
        }
        if config.decoder_style == DecoderStyle::Interleaved {
            for j in 1..=config.decoder_layers {
                let a = &self.bindings[&Slot::dec(j, ModuleKind::Ffn)];
                let b = &self.bindings[&Slot::dec(j, ModuleKind::FfnPost)];
                if a != b {
                    return Err(Error::Config(format!(
                        "slot {} binds {b} but its interleaved partner {} binds {a}; both FFN applications of a layer must share one group",
                        Slot::dec(j, ModuleKind::FfnPost),
                        Slot::dec(j, ModuleKind::Ffn)
                    )));
                }
            }
        }
        for name in self.groups.keys() {
            if !self.bindings.values().any(|b| &b.group == name) {
                return Err(Error::Config(format!("group `{name}` has no slot bound to it")));
            }
        }
        Ok(())
    }

    pub fn binding(&self, slot: Slot) -> Result<&Binding> {
        self.bindings
            .get(&slot)
            .ok_or_else(|| Error::Config(format!("slot {slot} is not bound to any group")))
    }

    /// Number of applications of each group's parameters in one forward pass.
    /// For whole-layer groups the load is the per-part count (uniform for
    /// the standard schemes); the maximum over parts is reported otherwise.
    pub fn load_report(&self) -> BTreeMap<String, usize> {
        let mut per_part: BTreeMap<(String, Part), usize> = BTreeMap::new();
        for b in self.bindings.values() {
            *per_part.entry((b.group.clone(), b.part)).or_default() += 1;
        }
        let mut loads = BTreeMap::new();
        for ((group, _), n) in per_part {
            let e = loads.entry(group).or_insert(0);
            *e = (*e).max(n);
        }
        loads
    }

    /// Human-readable `slot = binding` lines, one per slot.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for (slot, b) in &self.bindings {
            s.push_str(&format!("{slot} = {b}\n"));
        }
        s
    }
}

fn check_edgeformer_shape(config: &ModelConfig) -> Result<()> {
    let offending = if config.decoder_style != DecoderStyle::Interleaved {
        Some((Slot::dec(1, ModuleKind::FfnPost), "requires an interleaved decoder"))
    } else if config.encoder_layers != 12 {
        let layer = config.encoder_layers.min(12) + 1;
        Some((Slot::enc(layer, ModuleKind::SelfAttn), "is defined only for a 12-layer encoder"))
    } else if config.decoder_layers != 2 {
        let layer = config.decoder_layers.min(2) + 1;
        Some((Slot::dec(layer, ModuleKind::SelfAttn), "is defined only for a 2-layer decoder"))
    } else {
        None
    };
    match offending {
        Some((slot, why)) => Err(Error::Config(format!(
            "edgeformer tying {why}; offending slot {slot} (use scheme = \"custom\" for other depths)"
        ))),
        None => Ok(()),
    }
}

/// Full group inventory of a model: plan groups plus embeddings, layer norms
/// and layer-adaptation groups.
pub fn store_layout(config: &ModelConfig, plan: &TyingPlan) -> Vec<(String, ShapeClass)> {
    let d = config.d_model;
    let mut out: Vec<(String, ShapeClass)> = plan.groups.iter().map(|(n, c)| (n.clone(), *c)).collect();
    let emb = ShapeClass::Embedding {
        vocab: config.vocab_size,
        d_embed: config.d_embed,
        d_model: d,
    };
    out.push(("embed".into(), emb));
    if !config.tie_output {
        out.push(("output".into(), emb));
    }
    let dec_sites = match config.decoder_style {
        DecoderStyle::Vanilla => NormSites::VanillaDecoder,
        DecoderStyle::Interleaved => NormSites::InterleavedDecoder,
    };
    for i in 1..=config.encoder_layers {
        out.push((format!("enc.{i}.norm"), ShapeClass::Norm { d, sites: NormSites::EncoderLayer }));
        match config.la {
            LayerAdapt::None => {}
            LayerAdapt::Bias => out.push((format!("enc.{i}.bias"), ShapeClass::Bias { d, inner: config.d_encffn })),
            LayerAdapt::Adapter { rank, .. } => out.push((format!("enc.{i}.adapter"), ShapeClass::Adapter { d, rank })),
            LayerAdapt::Prefix { length } => out.push((format!("enc.{i}.prefix"), ShapeClass::Prefix { len: length, d })),
        }
    }
    for j in 1..=config.decoder_layers {
        out.push((format!("dec.{j}.norm"), ShapeClass::Norm { d, sites: dec_sites }));
    }
    out.push(("enc.final_norm".into(), ShapeClass::Norm { d, sites: NormSites::Final }));
    out.push(("dec.final_norm".into(), ShapeClass::Norm { d, sites: NormSites::Final }));
    out
}

#[derive(Clone, Debug)]
pub struct ParamGroup<T: Scalar = f32> {
    pub name: String,
    pub class: ShapeClass,
    pub tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }
}

/// Single owner of every trainable array, addressed by `group/tensor` keys.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    groups: BTreeMap<String, ParamGroup<T>>,
}

fn split_key(key: &str) -> Result<(&str, &str)> {
    key.split_once('/')
        .ok_or_else(|| Error::InvalidInput(format!("parameter key `{key}` lacks a group")))
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_groups(groups: impl IntoIterator<Item = ParamGroup<T>>) -> Self {
        ParamStore {
            groups: groups.into_iter().map(|g| (g.name.clone(), g)).collect(),
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = &ParamGroup<T>> {
        self.groups.values()
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup<T>> {
        self.groups.get(name)
    }

    pub fn get(&self, key: &str) -> Result<&Arc<Tensor<T>>> {
        let (g, t) = split_key(key)?;
        self.groups
            .get(g)
            .and_then(|grp| grp.tensors.get(t))
            .ok_or_else(|| Error::Config(format!("parameter `{key}` missing from store")))
    }

    /// Mutable access; copies the buffer only if a graph still shares it.
    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor<T>> {
        let (g, t) = split_key(key)?;
        self.groups
            .get_mut(g)
            .and_then(|grp| grp.tensors.get_mut(t))
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Config(format!("parameter `{key}` missing from store")))
    }

    /// `(key, tensor)` for every array, in deterministic order.
    pub fn tensors(&self) -> impl Iterator<Item = (String, &Arc<Tensor<T>>)> {
        self.groups
            .values()
            .flat_map(|g| g.tensors.iter().map(move |(t, v)| (format!("{}/{t}", g.name), v)))
    }

    pub fn keys(&self) -> Vec<String> {
        self.tensors().map(|(k, _)| k).collect()
    }

    /// Number of scalars, each group counted once.
    pub fn param_count(&self, include_embeddings: bool) -> usize {
        self.groups
            .values()
            .filter(|g| include_embeddings || !g.class.is_embedding())
            .map(|g| g.param_count())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            groups: self
                .groups
                .iter()
                .map(|(n, g)| {
                    (
                        n.clone(),
                        ParamGroup {
                            name: g.name.clone(),
                            class: g.class,
                            tensors: g.tensors.iter().map(|(k, t)| (k.clone(), Arc::new(t.cast()))).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Check the store holds exactly the layout of `config`/`plan`.
    pub fn check_layout(&self, config: &ModelConfig, plan: &TyingPlan) -> Result<()> {
        let layout = store_layout(config, plan);
        if layout.len() != self.groups.len() {
            return Err(Error::Config(format!(
                "store has {} groups, configuration expects {}",
                self.groups.len(),
                layout.len()
            )));
        }
        for (name, class) in layout {
            let g = self
                .groups
                .get(&name)
                .ok_or_else(|| Error::Config(format!("group `{name}` missing from store")))?;
            if g.class != class {
                return Err(Error::Config(format!("group `{name}` is {}, expected {class}", g.class)));
            }
            for ts in class.tensors() {
                let t = g
                    .tensors
                    .get(&ts.name)
                    .ok_or_else(|| Error::Config(format!("tensor `{name}/{}` missing", ts.name)))?;
                if t.shape() != ts.shape.as_slice() {
                    return Err(Error::Config(format!(
                        "tensor `{name}/{}` has shape {:?}, expected {:?}",
                        ts.name,
                        t.shape(),
                        ts.shape
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Materialize every group of the layout once, deterministically under `seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig, plan: &TyingPlan, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    plan.validate(config)?;
    let mut layout = store_layout(config, plan);
    layout.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(layout.len());
    for (name, class) in layout {
        let mut tensors = BTreeMap::new();
        for ts in class.tensors() {
            let numel: usize = ts.shape.iter().product();
            let data: Vec<T> = match ts.init {
                Init::Zeros => vec![T::zero(); numel],
                Init::Ones => vec![T::one(); numel],
                Init::FanIn(fan_in) => {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    (0..numel).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect()
                }
                Init::Unit => {
                    let bound = 3f64.sqrt();
                    (0..numel).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect()
                }
            };
            tensors.insert(ts.name.clone(), Arc::new(Tensor::new(ts.shape.clone(), data)?));
        }
        groups.push(ParamGroup { name, class, tensors });
    }
    Ok(ParamStore::from_groups(groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge() -> (ModelConfig, TyingPlan) {
        let mut c = ModelConfig::edgeformer(32);
        c.heads = 2;
        c.vocab_size = 16;
        let p = TyingPlan::build(&c).unwrap();
        (c, p)
    }

    #[test]
    fn edgeformer_bindings_follow_tying_equations() {
        let (_, p) = edge();
        let g = |s: Slot| p.bindings[&s].group.clone();
        for i in 1..=8 {
            assert_eq!(g(Slot::enc(i, ModuleKind::SelfAttn)), g(Slot::enc(i + 4, ModuleKind::SelfAttn)));
        }
        for i in 1..=10 {
            assert_eq!(g(Slot::enc(i, ModuleKind::Ffn)), g(Slot::enc(i + 2, ModuleKind::Ffn)));
        }
        for j in 1..=2 {
            assert_eq!(g(Slot::dec(j, ModuleKind::SelfAttn)), g(Slot::enc(2 * j - 1, ModuleKind::SelfAttn)));
            assert_eq!(g(Slot::dec(j, ModuleKind::CrossAttn)), g(Slot::enc(2 * j, ModuleKind::SelfAttn)));
            assert_eq!(g(Slot::dec(j, ModuleKind::Ffn)), g(Slot::dec(1, ModuleKind::Ffn)));
            assert_eq!(g(Slot::dec(j, ModuleKind::FfnPost)), g(Slot::dec(1, ModuleKind::Ffn)));
        }
        assert_eq!(p.groups.len(), 7);
    }

    #[test]
    fn edgeformer_loads() {
        let (_, p) = edge();
        let loads = p.load_report();
        for a in 1..=4 {
            assert_eq!(loads[&format!("attn.{a}")], 4);
        }
        assert_eq!(loads["enc_ffn.1"], 6);
        assert_eq!(loads["enc_ffn.2"], 6);
        assert_eq!(loads["dec_ffn"], 4);
    }

    #[test]
    fn universal_and_full_loads() {
        let u = TyingPlan::build(&ModelConfig::universal(64, 12, 2)).unwrap();
        let loads = u.load_report();
        assert_eq!(loads["enc_layer"], 12);
        assert_eq!(loads["dec_layer"], 2);

        let f = TyingPlan::build(&ModelConfig::transformer(64, 6, 6)).unwrap();
        assert!(f.load_report().values().all(|&l| l == 1));
        assert_eq!(f.groups.len(), 6 * 2 + 6 * 3);
    }

    #[test]
    fn edgeformer_rejects_noncanonical_depths() {
        let mut c = ModelConfig::edgeformer(64);
        c.encoder_layers = 6;
        let e = TyingPlan::build(&c).unwrap_err().to_string();
        assert!(e.contains("enc.7.self_attn"), "{e}");

        let mut c = ModelConfig::edgeformer(64);
        c.decoder_layers = 3;
        let e = TyingPlan::build(&c).unwrap_err().to_string();
        assert!(e.contains("dec.3.self_attn"), "{e}");

        let mut c = ModelConfig::edgeformer(64);
        c.decoder_style = DecoderStyle::Vanilla;
        c.d_decffn = 256;
        assert!(TyingPlan::build(&c).is_err());
    }

    #[test]
    fn interleaved_ffn_applications_must_share_a_group() {
        let (c, mut p) = edge();
        p.groups.insert("other".into(), ShapeClass::DecoderFfn { d: 32, inner: 8 });
        p.bindings.insert(Slot::dec(2, ModuleKind::FfnPost), Binding::whole("other"));
        let e = p.validate(&c).unwrap_err().to_string();
        assert!(e.contains("dec.2.ffn_post"), "{e}");
    }

    #[test]
    fn custom_rejects_class_conflicts_and_short_lists() {
        let mut c = ModelConfig::preset("table3-6-6").unwrap();
        if let TyingScheme::Custom(ref mut t) = c.tying {
            t.encoder_ffn[0] = "attn.1".into();
        }
        assert!(TyingPlan::build(&c).is_err());

        let mut c = ModelConfig::preset("table3-6-6").unwrap();
        if let TyingScheme::Custom(ref mut t) = c.tying {
            t.encoder_attn.pop();
        }
        let e = TyingPlan::build(&c).unwrap_err().to_string();
        assert!(e.contains("enc.12.self_attn"), "{e}");
    }

    #[test]
    fn table3_loads() {
        let expect = [
            ("6-6", vec![6, 6]),
            ("4-4-4", vec![4, 4, 4]),
            ("3-3-3-3", vec![3, 3, 3, 3]),
            ("1-11", vec![1, 11]),
            ("11-1", vec![11, 1]),
        ];
        for (name, loads) in expect {
            let c = ModelConfig::preset(&format!("table3-{name}")).unwrap();
            let p = TyingPlan::build(&c).unwrap();
            let report = p.load_report();
            let got: Vec<usize> = (1..=loads.len()).map(|k| report[&format!("enc_ffn.{k}")]).collect();
            assert_eq!(got, loads, "{name}");
        }
    }

    #[test]
    fn slot_string_round_trip() {
        let (c, _) = edge();
        for s in Slot::all(&c) {
            assert_eq!(s.to_string().parse::<Slot>().unwrap(), s);
        }
        assert!("enc.x.ffn".parse::<Slot>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_shares_groups() {
        let (c, p) = edge();
        let a: ParamStore<f32> = init_params(&c, &p, 7).unwrap();
        let b: ParamStore<f32> = init_params(&c, &p, 7).unwrap();
        for ((ka, ta), (kb, tb)) in a.tensors().zip(b.tensors()) {
            assert_eq!(ka, kb);
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let c2: ParamStore<f32> = init_params(&c, &p, 8).unwrap();
        assert_ne!(a.get("attn.1/wq").unwrap(), c2.get("attn.1/wq").unwrap());

        // Two slots bound to one group resolve to the same array.
        let k1 = p.bindings[&Slot::enc(1, ModuleKind::SelfAttn)].key("wq");
        let k5 = p.bindings[&Slot::dec(1, ModuleKind::SelfAttn)].key("wq");
        assert!(Arc::ptr_eq(a.get(&k1).unwrap(), a.get(&k5).unwrap()));
        a.check_layout(&c, &p).unwrap();
    }
}
