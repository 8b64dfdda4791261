//! Evaluation metrics.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Argmax of each logits row compared with its target, over counted rows.
/// Returns `(correct, counted)`.
pub fn token_hits<T: Scalar>(logits: &Tensor<T>, targets: &[u32], counted: &[bool]) -> Result<(usize, usize)> {
    if logits.rows() != targets.len() || counted.len() != targets.len() {
        return Err(Error::shape(
            "token_accuracy",
            format!("{} rows, {} targets, {} mask entries", logits.rows(), targets.len(), counted.len()),
        ));
    }
    let mut hits = 0;
    let mut total = 0;
    for (r, (&t, &c)) in targets.iter().zip(counted).enumerate() {
        if !c {
            continue;
        }
        total += 1;
        if argmax(logits.row(r)) == t as usize {
            hits += 1;
        }
    }
    Ok((hits, total))
}

/// First index of the largest value.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of hypotheses identical to their reference; 0 for no pairs.
pub fn exact_match<S: PartialEq>(hyps: &[S], refs: &[S]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidInput(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Ok(0.0);
    }
    Ok(hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / hyps.len() as f64)
}

fn ngram_counts<W: Hash + Eq>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU (0-100): clipped 1-4-gram precisions, uniform weights,
/// brevity penalty, no smoothing. An empty corpus scores 0.
pub fn corpus_bleu<W: Hash + Eq>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidInput(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_is_100() {
        let h = vec![words("a b c d e"), words("x y z w")];
        assert!((corpus_bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty_closed_form() {
        let b = corpus_bleu(&[words("a b c d")], &[words("a b c d e")]).unwrap();
        let expect = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((b - expect).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
    }

    #[test]
    fn bleu_degenerate_inputs() {
        let empty: Vec<Vec<&str>> = vec![];
        assert_eq!(corpus_bleu(&empty, &empty).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&[words("")], &[words("a b")]).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&[words("a b c")], &[words("a b c")]).unwrap(), 0.0);
        assert!(corpus_bleu(&[words("a")], &[]).is_err());
    }

    #[test]
    fn exact_match_and_hits() {
        assert_eq!(exact_match(&[1, 2, 3], &[1, 0, 3]).unwrap(), 2.0 / 3.0);
        let logits = Tensor::<f32>::from_f64(&[2, 3], &[0.0, 1.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(token_hits(&logits, &[1, 1], &[true, true]).unwrap(), (1, 2));
        assert_eq!(token_hits(&logits, &[1, 1], &[true, false]).unwrap(), (1, 1));
    }
}
