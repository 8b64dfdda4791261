//! Shared helpers for the integration tests: tiny configurations, random
//! batches and a central-difference gradient check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use edgeformer::config::{CustomTying, DecoderStyle, LayerAdapt, ModelConfig, TyingScheme};
use edgeformer::graph::Activation;
use edgeformer::params::{ModuleKind, Slot, Stack};
use edgeformer::{Batch, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small vanilla or interleaved model, no dropout.
pub fn tiny(d: usize, enc: usize, dec: usize, vocab: usize, style: DecoderStyle) -> ModelConfig {
    let mut c = ModelConfig::transformer(d, enc, dec);
    c.heads = 2;
    c.vocab_size = vocab;
    c.max_len = 32;
    c.dropout = 0.0;
    c.decoder_style = style;
    if style == DecoderStyle::Interleaved {
        c.d_decffn = (d / 4).max(1);
    }
    c
}

/// Every slot bound to its own group, except that the two FFN applications
/// of an interleaved decoder layer always share one.
pub fn untied_scheme(config: &ModelConfig) -> TyingScheme {
    let names = |s: &str, n: usize| (1..=n).map(|i| format!("{s}.{i}")).collect::<Vec<_>>();
    let (m, n) = (config.encoder_layers, config.decoder_layers);
    TyingScheme::Custom(CustomTying {
        encoder_attn: names("u_enc_attn", m),
        encoder_ffn: names("u_enc_ffn", m),
        decoder_self_attn: names("u_dec_self", n),
        decoder_cross_attn: names("u_dec_cross", n),
        decoder_ffn: names("u_dec_ffn", n),
        decoder_ffn_post: None,
    })
}

/// A random custom plan: each slot draws from a small pool of group names.
pub fn random_custom(config: &ModelConfig, r: &mut ChaCha8Rng) -> TyingScheme {
    let mut pick = |prefix: &str, n: usize, pool: usize| -> Vec<String> {
        (0..n).map(|_| format!("{prefix}.{}", r.gen_range(1..=pool))).collect()
    };
    let (m, n) = (config.encoder_layers, config.decoder_layers);
    let encoder_attn = pick("attn", m, 2);
    let encoder_ffn = pick("enc_ffn", m, 2);
    // attention groups are shared between the stacks
    let decoder_self_attn = pick("attn", n, 3);
    let decoder_cross_attn = pick("attn", n, 3);
    let decoder_ffn = pick("dec_ffn", n, 2);
    TyingScheme::Custom(CustomTying {
        encoder_attn,
        encoder_ffn,
        decoder_self_attn,
        decoder_cross_attn,
        decoder_ffn,
        decoder_ffn_post: None,
    })
}

/// Random tiny configuration covering both decoder styles, all tying
/// schemes, every adaptation kind, factorized embeddings and untied output.
pub fn random_config(r: &mut ChaCha8Rng) -> ModelConfig {
    let style = if r.gen_bool(0.5) { DecoderStyle::Interleaved } else { DecoderStyle::Vanilla };
    let scheme = r.gen_range(0..4);
    let (enc, dec) = if scheme == 2 {
        (12, 2)
    } else {
        (r.gen_range(1..=3), r.gen_range(1..=2))
    };
    let style = if scheme == 2 { DecoderStyle::Interleaved } else { style };
    let d = if scheme == 2 { 8 } else { [8, 12][r.gen_range(0..2)] };
    let mut c = tiny(d, enc, dec, r.gen_range(6..=10), style);
    c.d_encffn = r.gen_range(4..=16);
    c.activation = if r.gen_bool(0.5) { Activation::Relu } else { Activation::Gelu };
    c.tie_output = r.gen_bool(0.7);
    if r.gen_bool(0.3) {
        c.d_embed = d / 2;
    }
    c.la = match r.gen_range(0..4) {
        0 => LayerAdapt::None,
        1 => LayerAdapt::Bias,
        2 => LayerAdapt::Adapter {
            rank: r.gen_range(1..=3),
            alpha: r.gen_range(0.5..2.0),
            rank_normalized: r.gen_bool(0.5),
        },
        _ => LayerAdapt::Prefix { length: r.gen_range(1..=3) },
    };
    c.tying = match scheme {
        0 => TyingScheme::Full,
        1 => TyingScheme::Universal,
        2 => TyingScheme::Edgeformer,
        _ => random_custom(&c, r),
    };
    c
}

/// Random ragged batch of content tokens (ids ≥ 4).
pub fn random_pairs(r: &mut ChaCha8Rng, vocab: usize, n: usize, max_len: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    (0..n)
        .map(|_| {
            let (a, b) = (r.gen_range(1..=max_len), r.gen_range(1..=max_len));
            let src = (0..a).map(|_| r.gen_range(4..vocab as u32)).collect();
            let tgt = (0..b).map(|_| r.gen_range(4..vocab as u32)).collect();
            (src, tgt)
        })
        .collect()
}

/// Add noise to every parameter so zero-initialized blocks are exercised.
pub fn jitter(model: &mut Model<f64>, scale: f64, r: &mut ChaCha8Rng) {
    for key in model.store.keys() {
        let t = model.store.get_mut(&key).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x += scale * r.gen_range(-1.0..1.0));
    }
}

pub fn loss_and_grads(model: &Model<f64>, batch: &Batch, smoothing: f64) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut f = model.forward(true, Some(0));
    let (loss, _) = f.loss(batch, smoothing).unwrap();
    let grads = f.graph.backward(loss).unwrap();
    let value = f.graph.value(loss).item();
    (value, f.param_grads(&grads))
}

pub fn loss(model: &Model<f64>, batch: &Batch, smoothing: f64) -> f64 {
    let mut f = model.forward(true, Some(0));
    let (loss, _) = f.loss(batch, smoothing).unwrap();
    f.graph.value(loss).item()
}

/// Central difference at one coordinate. A ReLU kink inside the stencil
/// shows up as disagreeing one-sided slopes; the step then shrinks until the
/// stencil clears it.
fn central_difference(probe: &mut Model<f64>, key: &str, j: usize, base: f64, batch: &Batch, smoothing: f64) -> f64 {
    let orig = probe.store.get(key).unwrap().data()[j];
    let at = |x: f64, probe: &mut Model<f64>| {
        probe.store.get_mut(key).unwrap().data_mut()[j] = x;
        loss(probe, batch, smoothing)
    };
    let mut h = 1e-5;
    let mut num = 0.0;
    for _ in 0..3 {
        let (up, down) = (at(orig + h, probe), at(orig - h, probe));
        num = (up - down) / (2.0 * h);
        let (fwd, bwd) = ((up - base) / h, (base - down) / h);
        if (fwd - bwd).abs() <= 1e-5 * fwd.abs().max(bwd.abs()).max(1e-2) {
            break;
        }
        h /= 30.0;
    }
    at(orig, probe);
    num
}

/// Worst per-tensor relative error `‖a−n‖ / max(‖a‖, ‖n‖)` between analytic
/// and central-difference gradients, over up to `per_tensor` sampled entries
/// of each tensor. Tensors whose sampled gradients are both below `floor` in
/// norm are skipped.
pub fn grad_check(model: &Model<f64>, batch: &Batch, smoothing: f64, per_tensor: usize, r: &mut ChaCha8Rng) -> (f64, String) {
    let (base, analytic) = loss_and_grads(model, batch, smoothing);
    let floor = 1e-8;
    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for key in model.store.keys() {
        let n = model.store.get(&key).unwrap().numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &j in &picks {
            let num = central_difference(&mut probe, &key, j, base, batch, smoothing);
            let a = analytic.get(&key).map_or(0.0, |g| g.data()[j]);
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale < floor {
            continue;
        }
        let rel = diff.sqrt() / scale;
        if rel > worst.0 {
            worst = (rel, key);
        }
    }
    worst
}

/// Each slot's group in `plan`, with module slots listed per group.
pub fn slots_by_group(model: &Model<f64>) -> BTreeMap<String, Vec<Slot>> {
    let mut out: BTreeMap<String, Vec<Slot>> = BTreeMap::new();
    for (slot, b) in &model.plan.bindings {
        out.entry(b.group.clone()).or_default().push(*slot);
    }
    out
}

pub fn all_slots(config: &ModelConfig) -> Vec<Slot> {
    Slot::all(config)
}

pub fn enc_slot(layer: usize) -> Slot {
    Slot::new(Stack::Encoder, layer, ModuleKind::SelfAttn)
}

use edgeformer::train::Adam;
use edgeformer::{decode, DecodeConfig, Scalar, TrainConfig, EOS};

/// Same model with every slot bound to its own group holding a copy of the
/// tied values. Returns the clone and, per untied key, its tied source key.
pub fn untied_clone<T: Scalar>(model: &Model<T>) -> (Model<T>, BTreeMap<String, String>) {
    let mut config = model.config.clone();
    config.tying = untied_scheme(&config);
    let mut clone: Model<T> = Model::new(config, 0).unwrap();
    let mut source = BTreeMap::new();
    for slot in Slot::all(&model.config) {
        let tied = model.plan.binding(slot).unwrap();
        let untied = clone.plan.binding(slot).unwrap().clone();
        let names: Vec<String> = clone.store.group(&untied.group).unwrap().tensors.keys().cloned().collect();
        for name in names {
            source.insert(untied.key(&name), tied.key(&name));
        }
    }
    for key in clone.store.keys() {
        let from = source.entry(key.clone()).or_insert_with(|| key.clone()).clone();
        let value = model.store.get(&from).unwrap().as_ref().clone();
        *clone.store.get_mut(&key).unwrap() = value;
    }
    (clone, source)
}

/// Tied gradients equal the per-slot sums of the untied clone, and an
/// optimizer step leaves all slots of a group bitwise identical.
pub fn tied_vs_untied(config: &ModelConfig, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let mut tied: Model<f64> = Model::new(config.clone(), seed).map_err(|e| e.to_string())?;
    jitter(&mut tied, 0.05, &mut r);
    let (untied, source) = untied_clone(&tied);
    let batch = Batch::from_pairs(&random_pairs(&mut r, config.vocab_size, 3, 6)).unwrap();
    if tied.logits(&batch).unwrap() != untied.logits(&batch).unwrap() {
        return Err("untied clone computes different logits".into());
    }
    let (_, tg) = loss_and_grads(&tied, &batch, 0.1);
    let (_, ug) = loss_and_grads(&untied, &batch, 0.1);
    let mut summed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (key, g) in &ug {
        let acc = summed.entry(source[key].clone()).or_insert_with(|| vec![0.0; g.numel()]);
        acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
    }
    for (key, g) in &tg {
        let s = summed.get(key).ok_or_else(|| format!("no untied slot feeds `{key}`"))?;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (a, b) in g.data().iter().zip(s) {
            diff = diff.max((a - b).abs());
            norm = norm.max(a.abs());
        }
        if diff > 1e-12 * norm.max(1.0) {
            return Err(format!("group gradient `{key}` differs from slot sum by {diff:e}"));
        }
    }
    // One Adam step: the tied update, and the untied clone fed each group's
    // gradient in every slot, must agree bit for bit.
    let cfg = TrainConfig { weight_decay: 0.01, ..Default::default() };
    let mut tied32: Model<f32> = tied.cast();
    let (mut untied32, _) = untied_clone(&tied32);
    let tg32: BTreeMap<String, Tensor> = tg.iter().map(|(k, g)| (k.clone(), g.cast())).collect();
    let ug32: BTreeMap<String, Tensor> = untied32.store.keys().into_iter().filter_map(|k| tg32.get(&source[&k]).map(|g| (k, g.clone()))).collect();
    Adam::default().step(&mut tied32, &tg32, 1e-3, &cfg).map_err(|e| e.to_string())?;
    Adam::default().step(&mut untied32, &ug32, 1e-3, &cfg).map_err(|e| e.to_string())?;
    for key in untied32.store.keys() {
        let a = untied32.store.get(&key).unwrap();
        let b = tied32.store.get(&source[&key]).unwrap();
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("slot tensor `{key}` diverged from its group after a step"));
        }
    }
    Ok(())
}

/// Base model sharing every non-adaptation parameter with `model`.
pub fn strip_adaptation(model: &Model<f32>) -> Model<f32> {
    let mut config = model.config.clone();
    config.la = LayerAdapt::None;
    let mut base: Model<f32> = Model::new(config, 0).unwrap();
    for key in base.store.keys() {
        *base.store.get_mut(&key).unwrap() = model.store.get(&key).unwrap().as_ref().clone();
    }
    base
}

/// Log-probability of `tokens` (plus EOS when `finished`) by a full
/// teacher-forced pass.
pub fn sequence_logprob(model: &Model<f64>, src: &[u32], tokens: &[u32], finished: bool) -> f64 {
    let batch = Batch::new(&[(src, tokens)]).unwrap();
    let logits = model.logits(&batch).unwrap();
    let n = if finished { tokens.len() + 1 } else { tokens.len() };
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let t = if i < tokens.len() { tokens[i] } else { EOS };
            row[t as usize] - lse
        })
        .sum()
}

/// Every output the search can return: finished sequences of at most
/// `max_len` tokens with EOS, and unfinished sequences of exactly `max_len`.
pub fn enumerate_outputs(vocab: usize, max_len: usize) -> Vec<(Vec<u32>, bool)> {
    let content: Vec<u32> = (4..vocab as u32).collect();
    let mut out = Vec::new();
    let mut layer: Vec<Vec<u32>> = vec![Vec::new()];
    for len in 0..=max_len {
        for seq in &layer {
            if len < max_len {
                out.push((seq.clone(), true));
            } else {
                out.push((seq.clone(), false));
            }
        }
        layer = layer
            .iter()
            .flat_map(|s| content.iter().map(move |&t| [s.clone(), vec![t]].concat()))
            .collect();
    }
    out
}

pub enum BeamVerdict {
    /// Beam output reaches the enumerated optimum.
    Optimal,
    /// Optimum never appeared among the returned hypotheses: pruned.
    Pruned { gap: f64 },
    /// Optimum was returned but ranked below another: a search bug.
    Violation(String),
}

/// Compare beam search (α = 0) against brute-force enumeration on a random
/// tiny model.
pub fn beam_vs_enumeration(seed: u64, beam: usize) -> BeamVerdict {
    let (vocab, max_len) = (6, 4);
    let mut r = rng(seed);
    let mut config = tiny(8, 2, 2, vocab, DecoderStyle::Vanilla);
    config.la = LayerAdapt::None;
    let mut model: Model<f64> = Model::new(config, seed).unwrap();
    jitter(&mut model, 0.3, &mut r);
    let src: Vec<u32> = (0..r.gen_range(1..=4)).map(|_| r.gen_range(4..vocab as u32)).collect();
    let cfg = DecodeConfig { beam, max_len, alpha: 0.0, cached: true };
    let hyps = decode(model.view(), &src, &cfg).unwrap();
    let best = &hyps[0];
    let mut oracle: Vec<(f64, Vec<u32>, bool)> = enumerate_outputs(vocab, max_len)
        .into_iter()
        .map(|(t, fin)| (sequence_logprob(&model, &src, &t, fin), t, fin))
        .collect();
    oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (opt, opt_tokens, opt_fin) = &oracle[0];
    for h in &hyps {
        let lp = sequence_logprob(&model, &src, &h.tokens, h.finished);
        if (lp - h.logprob).abs() > 1e-9 {
            return BeamVerdict::Violation(format!("search logprob {} vs recomputed {lp}", h.logprob));
        }
    }
    if best.score >= opt - 1e-9 {
        return BeamVerdict::Optimal;
    }
    match hyps.iter().find(|h| &h.tokens == opt_tokens && h.finished == *opt_fin) {
        Some(h) => BeamVerdict::Violation(format!("optimum returned with score {} but ranked below {}", h.score, best.score)),
        None => BeamVerdict::Pruned { gap: opt - best.score },
    }
}
