//! Sequence-level knowledge distillation: the teacher's beam output replaces
//! the reference targets of a training corpus.

use crate::config::ModelConfig;
use crate::data::{Pair, Vocab};
use crate::decode::{decode_all, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::ModelRef;

/// Reject a teacher/student pair that does not share one vocabulary.
pub fn check_vocab(teacher: &ModelConfig, student: &ModelConfig, tv: Option<&Vocab>, sv: Option<&Vocab>) -> Result<()> {
    if teacher.vocab_size != student.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "teacher has {} symbols, student {}",
            teacher.vocab_size, student.vocab_size
        )));
    }
    if let (Some(a), Some(b)) = (tv, sv) {
        if a != b {
            let at = a.content_ids().find(|&i| a.token(i) != b.token(i));
            return Err(Error::VocabMismatch(format!(
                "teacher and student symbol tables differ (first at id {})",
                at.map_or("?".into(), |i| i.to_string())
            )));
        }
    }
    Ok(())
}

/// Pair every source with the teacher's best hypothesis. Output order and
/// length follow `sources`.
pub fn seq_kd(teacher: ModelRef<'_, f32>, sources: &[Vec<u32>], cfg: &DecodeConfig) -> Result<Vec<Pair>> {
    let hyps = decode_all(teacher, sources, cfg)?;
    Ok(sources.iter().cloned().zip(hyps.into_iter().map(|h| h.tokens)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn cfg(v: usize) -> ModelConfig {
        let mut c = ModelConfig::transformer(16, 1, 1);
        c.heads = 2;
        c.vocab_size = v;
        c
    }

    #[test]
    fn vocab_checks() {
        assert!(check_vocab(&cfg(10), &cfg(10), None, None).is_ok());
        assert!(matches!(check_vocab(&cfg(10), &cfg(11), None, None), Err(Error::VocabMismatch(_))));
        let a = Vocab::synthetic(10).unwrap();
        let b = Vocab::new(["q", "r", "s", "t", "u", "v"].map(String::from)).unwrap();
        assert!(check_vocab(&cfg(10), &cfg(10), Some(&a), Some(&a)).is_ok());
        assert!(matches!(check_vocab(&cfg(10), &cfg(10), Some(&a), Some(&b)), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn one_output_per_source() {
        let m: Model = Model::new(cfg(10), 4).unwrap();
        let sources = vec![vec![4, 5], vec![6], vec![7, 8, 9]];
        let out = seq_kd(m.view(), &sources, &DecodeConfig { beam: 2, max_len: 5, ..Default::default() }).unwrap();
        assert_eq!(out.len(), 3);
        for ((s, _), src) in out.iter().zip(&sources) {
            assert_eq!(s, src);
        }
    }
}
