//! Greedy and beam-search decoding with an incremental decoder cache.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::ModelRef;
use crate::tensor::{Scalar, Tensor};

fn default_beam() -> usize {
    5
}

fn default_max_len() -> usize {
    64
}

fn default_alpha() -> f64 {
    0.6
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// 1 is greedy decoding.
    #[serde(default = "default_beam")]
    pub beam: usize,
    /// Maximum number of generated tokens, EOS included.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Length penalty: hypotheses are ranked by `logprob / len^alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Reuse decoder keys/values across steps instead of re-running the
    /// decoder over the whole prefix.
    #[serde(default = "default_true")]
    pub cached: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: default_beam(),
            max_len: default_max_len(),
            alpha: default_alpha(),
            cached: true,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            beam: 1,
            max_len,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("beam and max_len must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("length penalty {} must be finite and nonnegative", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, EOS included when finished.
    pub logprob: f64,
    /// `logprob / len^alpha` with `len` counting EOS.
    pub score: f64,
    /// Ended with EOS (otherwise cut at `max_len`).
    pub finished: bool,
}

fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            row.iter().map(|v| v.as_f64() - lse).collect()
        })
        .collect()
}

fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len as f64).powf(alpha)
    }
}

/// Decode one source sequence (without EOS); hypotheses best first.
///
/// Every step extends each live hypothesis by every token except PAD and
/// BOS. Each EOS extension is moved to the finished list; the `beam` best
/// other extensions stay live. Search stops at `max_len` or when no live
/// hypothesis can still beat the best finished one. `max_len` is capped by
/// the model's position limit.
pub fn decode<T: Scalar>(model: ModelRef<'_, T>, source: &[u32], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    // The decoder input (BOS + prefix) must fit the position table.
    let max_len = cfg.max_len.min(model.config.max_len);
    let mut src = source.to_vec();
    src.push(EOS);
    let src_len = src.len();
    let mask = vec![true; src_len];
    let mut f = model.forward();
    let memory = f.encode(&src, &mask, 1, src_len)?;
    let mut cache = if cfg.cached {
        Some(f.start_cache(memory, &mask, src_len, 1)?)
    } else {
        None
    };
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let logits = match cache.as_mut() {
            Some(c) => {
                let last: Vec<u32> = live.iter().map(|(t, _)| t.last().copied().unwrap_or(BOS)).collect();
                f.next_logits_cached(c, &last)?
            }
            None => {
                let prefixes: Vec<u32> = live
                    .iter()
                    .flat_map(|(t, _)| std::iter::once(BOS).chain(t.iter().copied()))
                    .collect();
                f.next_logits_uncached(memory, &mask, src_len, &prefixes, live.len())?
            }
        };
        let logp = log_softmax_rows(&logits);
        let len = step + 1;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (b, (tokens, lp)) in live.iter().enumerate() {
            for (v, &l) in logp[b].iter().enumerate() {
                let v = v as u32;
                if v == PAD || v == BOS {
                    continue;
                }
                if v == EOS {
                    let total = lp + l;
                    finished.push(Hypothesis {
                        tokens: tokens.clone(),
                        logprob: total,
                        score: normalized(total, len, cfg.alpha),
                        finished: true,
                    });
                } else {
                    candidates.push((lp + l, b, v));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam);
        if step + 1 == max_len {
            for &(lp, b, v) in &candidates {
                let mut tokens = live[b].0.clone();
                tokens.push(v);
                finished.push(Hypothesis {
                    tokens,
                    logprob: lp,
                    score: normalized(lp, len, cfg.alpha),
                    finished: false,
                });
            }
            break;
        }
        if candidates.is_empty() {
            break;
        }
        let order: Vec<usize> = candidates.iter().map(|c| c.1).collect();
        live = candidates
            .iter()
            .map(|&(lp, b, v)| {
                let mut t = live[b].0.clone();
                t.push(v);
                (t, lp)
            })
            .collect();
        if let Some(c) = cache.as_mut() {
            c.reorder(&order);
        }
        // Log-probabilities only fall, so a live hypothesis can at best keep
        // its log-probability and stretch to the longest length.
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live
            .iter()
            .map(|(_, lp)| if cfg.alpha == 0.0 { *lp } else { lp / (max_len as f64).powf(cfg.alpha) })
            .fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= cfg.beam && best_done >= best_live {
            break;
        }
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(finished)
}

/// Best hypothesis per source, decoded in parallel, order preserved.
pub fn decode_all<T: Scalar>(model: ModelRef<'_, T>, sources: &[Vec<u32>], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    sources
        .par_iter()
        .map(|s| {
            decode(model, s, cfg)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::InvalidInput("decoding produced no hypothesis".into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderStyle, ModelConfig};
    use crate::model::Model;

    fn tiny(seed: u64) -> Model {
        let mut c = ModelConfig::transformer(16, 1, 2);
        c.heads = 2;
        c.vocab_size = 9;
        c.d_encffn = 16;
        c.d_decffn = 4;
        c.decoder_style = DecoderStyle::Interleaved;
        c.dropout = 0.0;
        c.max_len = 32;
        Model::new(c, seed).unwrap()
    }

    #[test]
    fn greedy_is_stepwise_argmax() {
        let m = tiny(2);
        let hyp = &decode(m.view(), &[4, 5, 6], &DecodeConfig::greedy(6)).unwrap()[0];
        let src = [4u32, 5, 6, EOS];
        let mut f = m.view().forward();
        let memory = f.encode(&src, &[true; 4], 1, 4).unwrap();
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..6 {
            let l = f.next_logits_uncached(memory, &[true; 4], 4, &prefix, 1).unwrap();
            let lp = log_softmax_rows(&l);
            let best = (0..9u32)
                .filter(|&v| v != PAD && v != BOS)
                .max_by(|&a, &b| lp[0][a as usize].total_cmp(&lp[0][b as usize]).then(b.cmp(&a)))
                .unwrap();
            if best == EOS {
                break;
            }
            out.push(best);
            prefix.push(best);
        }
        assert_eq!(hyp.tokens, out);
    }

    #[test]
    fn cache_matches_recomputation() {
        let m = tiny(5);
        for beam in [1, 3] {
            let cfg = DecodeConfig {
                beam,
                max_len: 7,
                alpha: 0.6,
                cached: true,
            };
            let a = decode(m.view(), &[4, 7, 8], &cfg).unwrap();
            let b = decode(m.view(), &[4, 7, 8], &DecodeConfig { cached: false, ..cfg.clone() }).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.tokens, y.tokens);
                assert_eq!(x.logprob.to_bits(), y.logprob.to_bits());
            }
        }
    }

    #[test]
    fn never_emits_pad_or_bos() {
        let m = tiny(11);
        for h in decode(m.view(), &[5, 5], &DecodeConfig::default()).unwrap() {
            assert!(h.tokens.iter().all(|&t| t != PAD && t != BOS && t != EOS));
            assert!(h.tokens.len() <= 32);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let m = tiny(1);
        let cfg = DecodeConfig { beam: 0, ..Default::default() };
        assert!(decode(m.view(), &[4], &cfg).is_err());
    }
}
