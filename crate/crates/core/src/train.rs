//! Training loop: label-smoothed cross-entropy, Adam with decoupled weight
//! decay, inverse-square-root schedule with linear warmup, global-norm
//! clipping and dev-loss model selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::metrics::token_hits;
use crate::model::{Batch, Model, ModelRef};
use crate::tensor::Tensor;

fn d_lr() -> f64 {
    1e-3
}
fn d_warmup() -> usize {
    400
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-8
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_max_steps() -> usize {
    2000
}
fn d_batch_tokens() -> usize {
    1024
}
fn d_accumulate() -> usize {
    1
}
fn d_clip() -> f64 {
    1.0
}
fn d_seed() -> u64 {
    1
}
fn d_eval_every() -> usize {
    200
}
fn d_log_every() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_smoothing")]
    pub smoothing: f64,
    #[serde(default = "d_max_steps")]
    pub max_steps: usize,
    /// Padded source+target tokens per micro-batch.
    #[serde(default = "d_batch_tokens")]
    pub batch_tokens: usize,
    /// Micro-batches per update.
    #[serde(default = "d_accumulate")]
    pub accumulate: usize,
    /// Global gradient-norm threshold; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Dev evaluation (and best-model selection) interval; 0 evaluates
    /// only at the end.
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1");
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad("label smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("eps must be positive; weight decay and clip norm nonnegative");
        }
        if self.batch_tokens == 0 || self.accumulate == 0 || self.max_steps == 0 {
            return bad("batch_tokens, accumulate and max_steps must be at least 1");
        }
        Ok(())
    }

    /// `peak · min(step/warmup, sqrt(warmup/step))` for `step ≥ 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

/// Group pair indices into micro-batches of at most `batch_tokens` padded
/// tokens (a single oversized pair still forms its own batch).
pub fn make_batches(pairs: &[Pair], order: &[usize], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut ms, mut mt) = (0, 0);
    for &i in order {
        let (s, t) = (pairs[i].0.len() + 1, pairs[i].1.len() + 1);
        let (ns, nt) = (ms.max(s), mt.max(t));
        if !cur.is_empty() && (cur.len() + 1) * (ns + nt) > batch_tokens {
            out.push(std::mem::take(&mut cur));
            (ms, mt) = (s, t);
        } else {
            (ms, mt) = (ns, nt);
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn batch_of(pairs: &[Pair], idx: &[usize]) -> Result<Batch> {
    let refs: Vec<(&[u32], &[u32])> = idx.iter().map(|&i| (&pairs[i].0[..], &pairs[i].1[..])).collect();
    Batch::new(&refs)
}

/// Teacher-forced statistics over a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TfStats {
    /// Mean unsmoothed cross-entropy per target token (EOS included).
    pub loss: f64,
    pub hits: usize,
    pub total: usize,
}

impl TfStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Teacher-forced loss and token accuracy, batches evaluated in parallel.
pub fn teacher_forced(model: ModelRef<'_, f32>, pairs: &[Pair], batch_tokens: usize) -> Result<TfStats> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty evaluation corpus".into()));
    }
    let order: Vec<usize> = (0..pairs.len()).collect();
    let parts = make_batches(pairs, &order, batch_tokens)
        .par_iter()
        .map(|idx| {
            let batch = batch_of(pairs, idx)?;
            let mut f = model.forward();
            let (loss, logits) = f.loss(&batch, 0.0)?;
            let n = batch.target_tokens();
            let (hits, total) = token_hits(f.graph.value(logits), &batch.tgt_out, &batch.tgt_mask)?;
            Ok((f.graph.value(loss).item() as f64 * n as f64, hits, total))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, hits, total) = parts
        .iter()
        .fold((0.0, 0, 0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    Ok(TfStats {
        loss: sum / total.max(1) as f64,
        hits,
        total,
    })
}

/// Adam moments per parameter key.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u32,
}

impl Adam {
    /// One update with decoupled weight decay on rank-2 tensors.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (key, g) in grads {
            let p = model.store.get_mut(key)?;
            let n = p.numel();
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if p.rank() == 2 { cfg.weight_decay } else { 0.0 };
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = (cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g) as f32;
                *v = (cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g) as f32;
                let upd = (*m as f64 / bc1) / ((*v as f64 / bc2).sqrt() + cfg.eps) + decay * *w as f64;
                *w = (*w as f64 - lr * upd) as f32;
            }
        }
        Ok(())
    }
}

fn group_of(key: &str) -> &str {
    key.split_once('/').map_or(key, |(g, _)| g)
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

fn non_finite(step: usize, loss: f64, grads: &BTreeMap<String, Tensor>) -> Error {
    let mut worst = (String::from("?"), 0.0f64);
    for (k, g) in grads {
        let m = g
            .data()
            .iter()
            .map(|&x| if x.is_finite() { x.abs() as f64 } else { f64::INFINITY })
            .fold(0.0, f64::max);
        if m > worst.1 || worst.0 == "?" {
            worst = (group_of(k).to_string(), m);
        }
    }
    Error::NonFinite {
        step,
        loss,
        group: worst.0,
        max_abs: worst.1,
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub last: Model,
    /// Parameters with the lowest dev loss seen at an evaluation point.
    pub best: Model,
    pub best_step: usize,
    pub best_dev: TfStats,
    /// `step=N key=value ...` lines.
    pub log: Vec<String>,
}

/// Train `model` on `train`, selecting the best dev-loss snapshot. Each log
/// line is also passed to `sink` as it is produced.
pub fn train(mut model: Model, train: &[Pair], dev: &[Pair], cfg: &TrainConfig, sink: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidInput("training and dev corpora must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut adam = Adam::default();
    let mut log = Vec::new();
    let mut emit = |line: String, log: &mut Vec<String>| {
        sink(&line);
        log.push(line);
    };
    let mut best: Option<(Model, usize, TfStats)> = None;
    let (mut run_loss, mut run_hits, mut run_total, mut run_n) = (0.0, 0usize, 0usize, 0usize);
    for step in 1..=cfg.max_steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut step_loss = 0.0;
        for micro in 0..cfg.accumulate {
            if queue.is_empty() {
                order.shuffle(&mut rng);
                queue = make_batches(train, &order, cfg.batch_tokens);
                queue.reverse();
            }
            let idx = queue.pop().expect("nonempty queue");
            let batch = batch_of(train, &idx)?;
            let dropout_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step * cfg.accumulate + micro) as u64);
            let mut f = model.forward(true, Some(dropout_seed));
            let (loss, logits) = f.loss(&batch, cfg.smoothing)?;
            let lv = f.graph.value(loss).item() as f64;
            let (h, t) = token_hits(f.graph.value(logits), &batch.tgt_out, &batch.tgt_mask)?;
            run_hits += h;
            run_total += t;
            let g = f.graph.backward(loss)?;
            let pg = f.param_grads(&g);
            drop(f);
            if !lv.is_finite() {
                return Err(non_finite(step, lv, &pg));
            }
            step_loss += lv / cfg.accumulate as f64;
            let k = 1.0 / cfg.accumulate as f32;
            for (key, t) in pg {
                match grads.get_mut(&key) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += k * b),
                    None => {
                        let mut t = t;
                        if cfg.accumulate > 1 {
                            t.data_mut().iter_mut().for_each(|x| *x *= k);
                        }
                        grads.insert(key, t);
                    }
                }
            }
        }
        let norm = clip_grads(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(non_finite(step, step_loss, &grads));
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut model, &grads, lr, cfg)?;
        run_loss += step_loss;
        run_n += 1;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.max_steps) {
            emit(
                format!(
                    "step={step} loss={:.5} acc={:.4} lr={:.6e} grad_norm={:.4}",
                    run_loss / run_n as f64,
                    run_hits as f64 / run_total.max(1) as f64,
                    lr,
                    norm
                ),
                &mut log,
            );
            (run_loss, run_hits, run_total, run_n) = (0.0, 0, 0, 0);
        }
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.max_steps {
            let stats = teacher_forced(model.view(), dev, cfg.batch_tokens)?;
            emit(
                format!("step={step} dev_loss={:.5} dev_acc={:.4}", stats.loss, stats.accuracy()),
                &mut log,
            );
            if best.as_ref().is_none_or(|b| stats.loss < b.2.loss) {
                best = Some((model.clone(), step, stats));
            }
        }
    }
    let (best, best_step, best_dev) = best.expect("final step evaluates");
    Ok(TrainOutcome {
        last: model,
        best,
        best_step,
        best_dev,
        log,
    })
}
