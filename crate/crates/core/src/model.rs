//! The seq2seq Transformer: embeddings, pre-norm encoder layers, vanilla and
//! interleaved decoder layers, and the output projection.
//!
//! Parameters are fetched by key from a [`ParamSource`] and entered into the
//! graph once per forward pass, so every slot bound to a tied group reads the
//! same leaf and gradients of tied slots add up on that leaf.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderStyle, LayerAdapt, ModelConfig};
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{AttentionSpec, Gradients, Graph, Var};
use crate::params::{init_params, Binding, ModuleKind, ParamStore, Slot, TyingPlan};
use crate::tensor::{Scalar, Tensor};

/// Anything that can hand out parameter arrays by `group/tensor` key.
pub trait ParamSource<T: Scalar>: Sync {
    fn fetch(&self, key: &str) -> Result<Arc<Tensor<T>>>;
}

impl<T: Scalar> ParamSource<T> for ParamStore<T> {
    fn fetch(&self, key: &str) -> Result<Arc<Tensor<T>>> {
        self.get(key).cloned()
    }
}

/// A padded batch of source/target pairs.
///
/// Sources get a trailing EOS; the decoder input is `BOS y` and the
/// prediction target `y EOS`. Padding uses `PAD` with a false mask entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    pub fn new(pairs: &[(&[u32], &[u32])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let src_len = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap();
        let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap();
        let size = pairs.len();
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            src_mask: vec![false; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_mask: vec![false; size * tgt_len],
        };
        for (i, (s, t)) in pairs.iter().enumerate() {
            let row = i * src_len;
            for (j, &tok) in s.iter().chain(std::iter::once(&EOS)).enumerate() {
                b.src[row + j] = tok;
                b.src_mask[row + j] = true;
            }
            let row = i * tgt_len;
            b.tgt_in[row] = BOS;
            for (j, &tok) in t.iter().enumerate() {
                b.tgt_in[row + j + 1] = tok;
                b.tgt_out[row + j] = tok;
            }
            b.tgt_out[row + t.len()] = EOS;
            b.tgt_mask[row..row + t.len() + 1].iter_mut().for_each(|m| *m = true);
        }
        Ok(b)
    }

    pub fn from_pairs(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        Batch::new(&refs)
    }

    /// Number of non-padding target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }
}

/// Sinusoidal position encodings for positions `offset..offset+len`.
pub fn positions<T: Scalar>(offset: usize, len: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len * d);
    for pos in offset..offset + len {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            out.push(T::from_f64_lossy(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

/// Configuration, tying plan and parameters of one model.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub plan: TyingPlan,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let plan = TyingPlan::build(&config)?;
        let store = init_params(&config, &plan, seed)?;
        Ok(Model { config, plan, store })
    }

    pub fn from_parts(config: ModelConfig, plan: TyingPlan, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        plan.validate(&config)?;
        store.check_layout(&config, &plan)?;
        Ok(Model { config, plan, store })
    }

    /// Forward context reading this model's parameters.
    pub fn forward(&self, train: bool, seed: Option<u64>) -> Forward<'_, T> {
        Forward::new(&self.config, &self.plan, &self.store, train, seed)
    }

    pub fn view(&self) -> ModelRef<'_, T> {
        ModelRef {
            config: &self.config,
            plan: &self.plan,
            source: &self.store,
        }
    }

    /// Teacher-forced logits `[B·n_tgt × V]` without dropout.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        self.view().logits(batch)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            store: self.store.cast(),
        }
    }
}

/// Read-only view of a model whose parameters come from any source.
#[derive(Clone, Copy)]
pub struct ModelRef<'a, T: Scalar> {
    pub config: &'a ModelConfig,
    pub plan: &'a TyingPlan,
    pub source: &'a dyn ParamSource<T>,
}

impl<'a, T: Scalar> ModelRef<'a, T> {
    pub fn forward(&self) -> Forward<'a, T> {
        Forward::new(self.config, self.plan, self.source, false, None)
    }

    /// Teacher-forced logits `[B·n_tgt × V]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut f = self.forward();
        let logits = f.logits(batch)?;
        Ok(f.graph.value(logits).clone())
    }
}

/// One forward pass under construction.
pub struct Forward<'a, T: Scalar> {
    pub config: &'a ModelConfig,
    pub plan: &'a TyingPlan,
    source: &'a dyn ParamSource<T>,
    pub graph: Graph<T>,
    leaves: HashMap<String, Var>,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

/// Self-attention keys/values carried across incremental decoding steps,
/// plus the projected encoder memory for cross-attention. All tensors are
/// `[beams·len × d]` row blocks.
#[derive(Clone, Debug)]
pub struct DecoderCache<T: Scalar> {
    pub beams: usize,
    pub steps: usize,
    pub src_len: usize,
    pub self_kv: Vec<(Tensor<T>, Tensor<T>)>,
    pub cross_kv: Vec<(Arc<Tensor<T>>, Arc<Tensor<T>>)>,
    pub src_mask: Arc<[bool]>,
}

impl<T: Scalar> DecoderCache<T> {
    /// Keep the hypotheses `order` (indices into the current beams).
    pub fn reorder(&mut self, order: &[usize]) {
        if self.steps > 0 {
            for (k, v) in &mut self.self_kv {
                *k = k.gather_row_blocks(order, self.steps);
                *v = v.gather_row_blocks(order, self.steps);
            }
        }
        let src_len = self.src_len;
        let first: Vec<usize> = vec![0; order.len()];
        if order.len() != self.beams {
            for (k, v) in &mut self.cross_kv {
                *k = Arc::new(k.gather_row_blocks(&first, src_len));
                *v = Arc::new(v.gather_row_blocks(&first, src_len));
            }
            let row: Vec<bool> = self.src_mask[..src_len].to_vec();
            self.src_mask = row.iter().copied().cycle().take(order.len() * src_len).collect();
        }
        self.beams = order.len();
    }
}

fn append_rows<T: Scalar>(cache: &Tensor<T>, steps: usize, new: &Tensor<T>, beams: usize) -> Tensor<T> {
    let d = new.cols();
    let mut data = Vec::with_capacity((steps + 1) * beams * d);
    for b in 0..beams {
        if steps > 0 {
            data.extend_from_slice(&cache.data()[b * steps * d..(b + 1) * steps * d]);
        }
        data.extend_from_slice(new.row(b));
    }
    Tensor::new(vec![beams * (steps + 1), d], data).expect("cache shape")
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(
        config: &'a ModelConfig,
        plan: &'a TyingPlan,
        source: &'a dyn ParamSource<T>,
        train: bool,
        seed: Option<u64>,
    ) -> Self {
        Forward {
            config,
            plan,
            source,
            graph: Graph::new(),
            leaves: HashMap::new(),
            train,
            rng: if train { seed.map(ChaCha8Rng::seed_from_u64) } else { None },
        }
    }

    /// Leaf for parameter `key`, created on first use.
    pub fn param(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(key) {
            return Ok(v);
        }
        let t = self.source.fetch(key)?;
        let v = self.graph.leaf_shared(t, self.train);
        self.leaves.insert(key.to_string(), v);
        Ok(v)
    }

    /// Gradients of every parameter that entered the graph, by key.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.leaves
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.leaves.iter()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = if self.train { self.config.dropout } else { 0.0 };
        self.graph.dropout(x, p, self.rng.as_mut())
    }

    fn binding(&self, slot: Slot) -> Result<Binding> {
        self.plan.binding(slot).cloned()
    }

    /// Token embeddings scaled by √d plus positions for `batch` rows of
    /// `len` tokens starting at position `offset`.
    fn embed(&mut self, ids: &[u32], batch: usize, len: usize, offset: usize) -> Result<Var> {
        let d = self.config.d_model;
        if offset + len > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds max_len {}",
                offset + len,
                self.config.max_len
            )));
        }
        let table = self.param("embed/table")?;
        let mut x = self.graph.gather(table, ids)?;
        if self.config.factorized() {
            let proj = self.param("embed/proj")?;
            x = self.graph.matmul(x, proj)?;
        }
        let x = self.graph.scale(x, T::from_f64_lossy((d as f64).sqrt()));
        let pe = positions::<T>(offset, len, d);
        let mut tiled = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            tiled.extend_from_slice(&pe);
        }
        let pe = self.graph.constant(Tensor::new(vec![batch * len, d], tiled)?);
        let x = self.graph.add(x, pe)?;
        self.dropout(x)
    }

    fn layer_norm(&mut self, x: Var, group: &str, site: &str) -> Result<Var> {
        let g = self.param(&format!("{group}/{site}.gain"))?;
        let b = self.param(&format!("{group}/{site}.bias"))?;
        self.graph.layer_norm(x, g, b)
    }

    /// `x·W + b`, where the bias is the tied bias plus, under Bias-LA, the
    /// layer's own offset.
    fn linear(&mut self, x: Var, w_key: &str, b_key: &str, layer_bias: Option<String>) -> Result<Var> {
        let w = self.param(w_key)?;
        let mut b = self.param(b_key)?;
        if let Some(extra) = layer_bias {
            let e = self.param(&extra)?;
            b = self.graph.add(b, e)?;
        }
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    /// Adapter low-rank update `scaling · (x·A)·B` added to `y`.
    fn adapt(&mut self, y: Var, x: Var, layer: usize, which: &str) -> Result<Var> {
        let Some(scaling) = self.config.la.adapter_scaling() else {
            return Ok(y);
        };
        let a = self.param(&format!("enc.{layer}.adapter/a_{which}"))?;
        let b = self.param(&format!("enc.{layer}.adapter/b_{which}"))?;
        let xa = self.graph.matmul(x, a)?;
        let delta = self.graph.matmul(xa, b)?;
        let delta = self.graph.scale(delta, T::from_f64_lossy(scaling));
        self.graph.add(y, delta)
    }

    fn enc_bias(&self, layer: Option<usize>, name: &str) -> Option<String> {
        match (layer, &self.config.la) {
            (Some(i), LayerAdapt::Bias) => Some(format!("enc.{i}.bias/{name}")),
            _ => None,
        }
    }

    /// Multi-head attention of `q_in` over `kv_in`, projected with the
    /// parameters of `binding`. `enc_layer` enables encoder layer adaptation.
    fn attention(
        &mut self,
        binding: &Binding,
        q_in: Var,
        kv_in: Var,
        spec: AttentionSpec,
        enc_layer: Option<usize>,
    ) -> Result<Var> {
        let q = self.linear(q_in, &binding.key("wq"), &binding.key("bq"), self.enc_bias(enc_layer, "bq"))?;
        let (q, kv_in, spec) = match enc_layer {
            Some(i) => {
                let q = self.adapt(q, q_in, i, "q")?;
                if let LayerAdapt::Prefix { length } = self.config.la {
                    let p = self.param(&format!("enc.{i}.prefix/tokens"))?;
                    let kv = self.graph.concat_prefix(p, kv_in, spec.batch)?;
                    let spec = AttentionSpec {
                        k_len: spec.k_len + length,
                        prefix_len: length,
                        ..spec
                    };
                    (q, kv, spec)
                } else {
                    (q, kv_in, spec)
                }
            }
            None => (q, kv_in, spec),
        };
        let k = self.linear(kv_in, &binding.key("wk"), &binding.key("bk"), self.enc_bias(enc_layer, "bk"))?;
        let mut v = self.linear(kv_in, &binding.key("wv"), &binding.key("bv"), self.enc_bias(enc_layer, "bv"))?;
        if let Some(i) = enc_layer {
            v = self.adapt(v, kv_in, i, "v")?;
        }
        let ctx = self.graph.attention(q, k, v, spec)?;
        self.linear(ctx, &binding.key("wo"), &binding.key("bo"), self.enc_bias(enc_layer, "bo"))
    }

    fn ffn(&mut self, binding: &Binding, x: Var, enc_layer: Option<usize>) -> Result<Var> {
        let h = self.linear(x, &binding.key("w1"), &binding.key("b1"), self.enc_bias(enc_layer, "b1"))?;
        let h = self.graph.activate(h, self.config.activation);
        self.linear(h, &binding.key("w2"), &binding.key("b2"), self.enc_bias(enc_layer, "b2"))
    }

    fn residual(&mut self, x: Var, branch: Var) -> Result<Var> {
        let branch = self.dropout(branch)?;
        self.graph.add(x, branch)
    }

    /// One pre-norm encoder layer.
    pub fn encoder_layer(&mut self, layer: usize, x: Var, batch: usize, len: usize, mask: &Arc<[bool]>) -> Result<Var> {
        let norm = format!("enc.{layer}.norm");
        let attn = self.binding(Slot::enc(layer, ModuleKind::SelfAttn))?;
        let ffn = self.binding(Slot::enc(layer, ModuleKind::Ffn))?;
        let h = self.layer_norm(x, &norm, "attn")?;
        let spec = AttentionSpec {
            batch,
            heads: self.config.heads,
            q_len: len,
            k_len: len,
            causal: false,
            q_offset: 0,
            prefix_len: 0,
            key_mask: Some(Arc::clone(mask)),
        };
        let a = self.attention(&attn, h, h, spec, Some(layer))?;
        let x = self.residual(x, a)?;
        let h = self.layer_norm(x, &norm, "ffn")?;
        let f = self.ffn(&ffn, h, Some(layer))?;
        self.residual(x, f)
    }

    /// Encoder memory `[B·n_src × d]` after the final layer norm.
    pub fn encode(&mut self, src: &[u32], src_mask: &[bool], batch: usize, len: usize) -> Result<Var> {
        if src.len() != batch * len || src_mask.len() != src.len() {
            return Err(Error::shape("encode", format!("{} ids for batch {batch} × {len}", src.len())));
        }
        let mask: Arc<[bool]> = src_mask.into();
        let mut x = self.embed(src, batch, len, 0)?;
        for i in 1..=self.config.encoder_layers {
            x = self.encoder_layer(i, x, batch, len, &mask)?;
        }
        self.layer_norm(x, "enc.final_norm", "final")
    }

    /// One decoder layer over full target sequences. `self_spec` carries
    /// the causal/padding mask; cross-attention reads `memory`.
    fn decoder_layer(
        &mut self,
        layer: usize,
        y: Var,
        self_kv: Option<(Var, Var)>,
        self_spec: AttentionSpec,
        cross: CrossInput,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let norm = format!("dec.{layer}.norm");
        let sa = self.binding(Slot::dec(layer, ModuleKind::SelfAttn))?;
        let ca = self.binding(Slot::dec(layer, ModuleKind::CrossAttn))?;
        let ffn = self.binding(Slot::dec(layer, ModuleKind::Ffn))?;
        let interleaved = self.config.decoder_style == DecoderStyle::Interleaved;

        let h = self.layer_norm(y, &norm, "self_attn")?;
        let (a, new_kv) = self.self_attention(&sa, h, self_kv, self_spec)?;
        let mut y = self.residual(y, a)?;
        if interleaved {
            let h = self.layer_norm(y, &norm, "ffn")?;
            let f = self.ffn(&ffn, h, None)?;
            y = self.residual(y, f)?;
        }
        let h = self.layer_norm(y, &norm, "cross_attn")?;
        let c = self.cross_attention(&ca, h, cross)?;
        y = self.residual(y, c)?;
        let (site, binding) = if interleaved {
            ("ffn_post", self.binding(Slot::dec(layer, ModuleKind::FfnPost))?)
        } else {
            ("ffn", ffn)
        };
        let h = self.layer_norm(y, &norm, site)?;
        let f = self.ffn(&binding, h, None)?;
        Ok((self.residual(y, f)?, new_kv))
    }

    /// Decoder self-attention. With `cache`, the new keys/values are appended
    /// to the cached ones and returned for the next step.
    fn self_attention(
        &mut self,
        b: &Binding,
        h: Var,
        cache: Option<(Var, Var)>,
        spec: AttentionSpec,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let q = self.linear(h, &b.key("wq"), &b.key("bq"), None)?;
        let k = self.linear(h, &b.key("wk"), &b.key("bk"), None)?;
        let v = self.linear(h, &b.key("wv"), &b.key("bv"), None)?;
        let (k, v, new) = match cache {
            None => (k, v, None),
            Some((kc, vc)) => {
                let beams = spec.batch;
                let steps = spec.k_len - 1;
                let kt = append_rows(self.graph.value(kc), steps, self.graph.value(k), beams);
                let vt = append_rows(self.graph.value(vc), steps, self.graph.value(v), beams);
                let kv = self.graph.constant(kt.clone());
                let vv = self.graph.constant(vt.clone());
                (kv, vv, Some((kt, vt)))
            }
        };
        let ctx = self.graph.attention(q, k, v, spec)?;
        Ok((self.linear(ctx, &b.key("wo"), &b.key("bo"), None)?, new))
    }

    fn cross_attention(&mut self, b: &Binding, h: Var, cross: CrossInput) -> Result<Var> {
        let q = self.linear(h, &b.key("wq"), &b.key("bq"), None)?;
        let (k, v) = match cross.kv {
            Some(kv) => kv,
            None => {
                let k = self.linear(cross.memory, &b.key("wk"), &b.key("bk"), None)?;
                let v = self.linear(cross.memory, &b.key("wv"), &b.key("bv"), None)?;
                (k, v)
            }
        };
        let ctx = self.graph.attention(q, k, v, cross.spec)?;
        self.linear(ctx, &b.key("wo"), &b.key("bo"), None)
    }

    /// Teacher-forced decoder hidden states `[B·n_tgt × d]` after the final
    /// layer norm.
    pub fn decode(&mut self, memory: Var, batch: &Batch) -> Result<Var> {
        let src_mask: Arc<[bool]> = batch.src_mask.as_slice().into();
        let tgt_mask: Arc<[bool]> = batch.tgt_mask.as_slice().into();
        let mut tgt_key_mask = tgt_mask.to_vec();
        // BOS (the first decoder input) is always a real key.
        for b in 0..batch.size {
            tgt_key_mask[b * batch.tgt_len] = true;
        }
        self.decode_inputs(memory, &batch.tgt_in, Some(tgt_key_mask.into()), batch.size, batch.tgt_len, batch.src_len, src_mask)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_inputs(
        &mut self,
        memory: Var,
        tgt: &[u32],
        tgt_key_mask: Option<Arc<[bool]>>,
        size: usize,
        tgt_len: usize,
        src_len: usize,
        src_mask: Arc<[bool]>,
    ) -> Result<Var> {
        let mut y = self.embed(tgt, size, tgt_len, 0)?;
        let heads = self.config.heads;
        for j in 1..=self.config.decoder_layers {
            let self_spec = AttentionSpec {
                batch: size,
                heads,
                q_len: tgt_len,
                k_len: tgt_len,
                causal: true,
                q_offset: 0,
                prefix_len: 0,
                key_mask: tgt_key_mask.clone(),
            };
            let cross = CrossInput {
                memory,
                kv: None,
                spec: AttentionSpec {
                    batch: size,
                    heads,
                    q_len: tgt_len,
                    k_len: src_len,
                    causal: false,
                    q_offset: 0,
                    prefix_len: 0,
                    key_mask: Some(Arc::clone(&src_mask)),
                },
            };
            y = self.decoder_layer(j, y, None, self_spec, cross)?.0;
        }
        self.layer_norm(y, "dec.final_norm", "final")
    }

    /// Output projection to vocabulary logits.
    pub fn project(&mut self, hidden: Var) -> Result<Var> {
        let group = if self.config.tie_output { "embed" } else { "output" };
        let table = self.param(&format!("{group}/table"))?;
        let h = if self.config.factorized() {
            let proj = self.param(&format!("{group}/proj"))?;
            self.graph.matmul_ext(hidden, proj, true)?
        } else {
            hidden
        };
        self.graph.matmul_ext(h, table, true)
    }

    /// Teacher-forced logits `[B·n_tgt × V]`.
    pub fn logits(&mut self, batch: &Batch) -> Result<Var> {
        let memory = self.encode(&batch.src, &batch.src_mask, batch.size, batch.src_len)?;
        let hidden = self.decode(memory, batch)?;
        self.project(hidden)
    }

    /// Mean label-smoothed cross-entropy over non-padding targets; returns
    /// `(loss, logits)`.
    pub fn loss(&mut self, batch: &Batch, smoothing: f64) -> Result<(Var, Var)> {
        let logits = self.logits(batch)?;
        let loss = self
            .graph
            .cross_entropy(logits, &batch.tgt_out, Some(&batch.tgt_mask), smoothing)?;
        Ok((loss, logits))
    }

    /// Uncached next-token logits: the full decoder over `prefixes`
    /// (`beams` rows of `len` tokens, all starting with BOS), last row only.
    pub fn next_logits_uncached(&mut self, memory: Var, src_mask: &[bool], src_len: usize, prefixes: &[u32], beams: usize) -> Result<Tensor<T>> {
        let len = prefixes.len() / beams;
        let (memory, src_mask) = if beams > 1 {
            let rep = self.graph.value(memory).gather_row_blocks(&vec![0; beams], src_len);
            let mask: Vec<bool> = src_mask[..src_len].iter().copied().cycle().take(beams * src_len).collect();
            (self.graph.constant(rep), mask)
        } else {
            (memory, src_mask.to_vec())
        };
        let hidden = self.decode_inputs(memory, prefixes, None, beams, len, src_len, src_mask.into())?;
        let logits = self.project(hidden)?;
        let lv = self.graph.value(logits);
        let rows: Vec<usize> = (0..beams).map(|b| b * len + len - 1).collect();
        Ok(lv.gather_row_blocks(&rows, 1))
    }

    /// Project encoder memory into per-layer cross-attention keys/values.
    pub fn start_cache(&mut self, memory: Var, src_mask: &[bool], src_len: usize, beams: usize) -> Result<DecoderCache<T>> {
        let mut cross_kv = Vec::new();
        for j in 1..=self.config.decoder_layers {
            let b = self.binding(Slot::dec(j, ModuleKind::CrossAttn))?;
            let k = self.linear(memory, &b.key("wk"), &b.key("bk"), None)?;
            let v = self.linear(memory, &b.key("wv"), &b.key("bv"), None)?;
            cross_kv.push((self.graph.value_arc(k), self.graph.value_arc(v)));
        }
        let d = self.config.d_model;
        let mut cache = DecoderCache {
            beams: 1,
            steps: 0,
            src_len,
            self_kv: (0..self.config.decoder_layers)
                .map(|_| (Tensor::zeros(&[1, d]), Tensor::zeros(&[1, d])))
                .collect(),
            cross_kv,
            src_mask: src_mask.into(),
        };
        cache.reorder(&vec![0; beams]);
        Ok(cache)
    }

    /// Cached next-token logits for the last tokens of each hypothesis.
    pub fn next_logits_cached(&mut self, cache: &mut DecoderCache<T>, tokens: &[u32]) -> Result<Tensor<T>> {
        let beams = cache.beams;
        if tokens.len() != beams {
            return Err(Error::shape("decode step", format!("{} tokens for {beams} beams", tokens.len())));
        }
        let heads = self.config.heads;
        let step = cache.steps;
        let mut y = self.embed(tokens, beams, 1, step)?;
        for j in 1..=self.config.decoder_layers {
            let (kc, vc) = &cache.self_kv[j - 1];
            let kc = self.graph.constant(kc.clone());
            let vc = self.graph.constant(vc.clone());
            let self_spec = AttentionSpec {
                batch: beams,
                heads,
                q_len: 1,
                k_len: step + 1,
                causal: false,
                q_offset: step,
                prefix_len: 0,
                key_mask: None,
            };
            let (ck, cv) = &cache.cross_kv[j - 1];
            let ck = self.graph.leaf_shared(Arc::clone(ck), false);
            let cv = self.graph.leaf_shared(Arc::clone(cv), false);
            let cross = CrossInput {
                memory: ck,
                kv: Some((ck, cv)),
                spec: AttentionSpec {
                    batch: beams,
                    heads,
                    q_len: 1,
                    k_len: cache.src_len,
                    causal: false,
                    q_offset: 0,
                    prefix_len: 0,
                    key_mask: Some(Arc::clone(&cache.src_mask)),
                },
            };
            let (out, kv) = self.decoder_layer(j, y, Some((kc, vc)), self_spec, cross)?;
            y = out;
            cache.self_kv[j - 1] = kv.expect("cached step returns keys");
        }
        cache.steps += 1;
        let hidden = self.layer_norm(y, "dec.final_norm", "final")?;
        let logits = self.project(hidden)?;
        Ok(self.graph.value(logits).clone())
    }
}

struct CrossInput {
    memory: Var,
    kv: Option<(Var, Var)>,
    spec: AttentionSpec,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TyingScheme;

    pub(crate) fn tiny(style: DecoderStyle) -> ModelConfig {
        let mut c = ModelConfig::transformer(8, 2, 2);
        c.heads = 2;
        c.vocab_size = 11;
        c.d_encffn = 12;
        c.d_decffn = if style == DecoderStyle::Interleaved { 4 } else { 12 };
        c.decoder_style = style;
        c.max_len = 32;
        c.dropout = 0.0;
        c
    }

    fn batch() -> Batch {
        Batch::new(&[(&[4, 5, 6], &[7, 8]), (&[9, 4], &[5, 6, 7])]).unwrap()
    }

    #[test]
    fn batch_layout() {
        let b = batch();
        assert_eq!((b.src_len, b.tgt_len), (4, 4));
        assert_eq!(&b.src[..4], &[4, 5, 6, EOS]);
        assert_eq!(&b.src[4..], &[9, 4, EOS, PAD]);
        assert_eq!(&b.tgt_in[..4], &[BOS, 7, 8, PAD]);
        assert_eq!(&b.tgt_out[..4], &[7, 8, EOS, PAD]);
        assert_eq!(&b.tgt_mask[..4], &[true, true, true, false]);
        assert_eq!(b.target_tokens(), 7);
    }

    #[test]
    fn logits_shape_and_determinism() {
        for style in [DecoderStyle::Vanilla, DecoderStyle::Interleaved] {
            let m: Model = Model::new(tiny(style), 3).unwrap();
            let b = batch();
            let a = m.logits(&b).unwrap();
            assert_eq!(a.shape(), &[b.size * b.tgt_len, 11]);
            let again = m.logits(&b).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&again));
        }
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        let m: Model = Model::new(tiny(DecoderStyle::Vanilla), 0).unwrap();
        let b = Batch::new(&[(&[40], &[5])]).unwrap();
        assert!(matches!(m.logits(&b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m: Model = Model::new(tiny(DecoderStyle::Interleaved), 5).unwrap();
        let alone = m.logits(&Batch::new(&[(&[9, 4], &[5, 6])]).unwrap()).unwrap();
        let padded = m
            .logits(&Batch::new(&[(&[9, 4], &[5, 6]), (&[4, 5, 6, 7, 8], &[5, 6, 7, 8, 9])]).unwrap())
            .unwrap();
        for r in 0..3 {
            for (a, b) in alone.row(r).iter().zip(padded.row(r)) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cached_and_uncached_steps_agree() {
        for style in [DecoderStyle::Vanilla, DecoderStyle::Interleaved] {
            let m: Model = Model::new(tiny(style), 9).unwrap();
            let src = [4u32, 5, 6, EOS];
            let mask = [true; 4];
            let mut f = m.forward(false, None);
            let memory = f.encode(&src, &mask, 1, 4).unwrap();
            let mut cache = f.start_cache(memory, &mask, 4, 1).unwrap();
            let seq = [BOS, 7, 8, 9];
            for t in 0..seq.len() {
                let cached = f.next_logits_cached(&mut cache, &seq[t..t + 1]).unwrap();
                let full = f.next_logits_uncached(memory, &mask, 4, &seq[..=t], 1).unwrap();
                let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&cached), bits(&full), "{style:?} step {t}");
            }
        }
    }

    #[test]
    fn universal_model_builds() {
        let mut c = tiny(DecoderStyle::Vanilla);
        c.tying = TyingScheme::Universal;
        let m: Model = Model::new(c, 1).unwrap();
        assert_eq!(m.logits(&batch()).unwrap().shape(), &[8, 11]);
    }
}
