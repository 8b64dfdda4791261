//! Vocabularies, line-oriented parallel corpora and synthetic seq2seq tasks.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Whitespace-token vocabulary; ids 0..4 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(symbols: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for s in symbols {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("vocabulary token `{s}` is empty or contains whitespace")));
            }
            if index.contains_key(&s) {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token `{s}`")));
            }
            index.insert(s.clone(), tokens.len() as u32);
            tokens.push(s);
        }
        Ok(Vocab { tokens, index })
    }

    /// Single-character symbols for a vocabulary of `size` entries in total.
    pub fn synthetic(size: usize) -> Result<Self> {
        let content = size.checked_sub(SPECIALS.len()).unwrap_or(0);
        if content < 2 || content > ALPHABET.len() {
            return Err(Error::Config(format!(
                "synthetic vocabulary size must be in {}..={}, got {size}",
                SPECIALS.len() + 2,
                SPECIALS.len() + ALPHABET.len()
            )));
        }
        Vocab::new(ALPHABET.chars().take(content).map(String::from))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ids of the non-special tokens.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        SPECIALS.len() as u32..self.tokens.len() as u32
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization; unknown tokens map to UNK.
    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Join tokens with single spaces, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t != PAD && t != BOS)
            .map(|&t| self.token(t).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, specials first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Corrupt("vocabulary file must start with the special tokens".into()));
        }
        Vocab::new(lines[SPECIALS.len()..].iter().map(|s| s.to_string()))
            .map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub type Pair = (Vec<u32>, Vec<u32>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
    LookupTranslate,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Sort => "sort",
            Task::LookupTranslate => "lookup-translate",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort" => Ok(Task::Sort),
            "lookup-translate" => Ok(Task::LookupTranslate),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    /// Total vocabulary size including the four special tokens.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task: Task::Reverse,
            vocab_size: 32,
            min_len: 5,
            max_len: 12,
            train: 512,
            dev: 64,
            test: 64,
            seed: 1,
        }
    }
}

/// Train/dev/test splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Splits {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Vec<Pair>)> {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)].into_iter()
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        Vocab::synthetic(self.vocab_size)?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        let content = (self.vocab_size - SPECIALS.len()) as f64;
        let distinct: f64 = (self.min_len..=self.max_len)
            .map(|l| content.powi(l as i32))
            .sum();
        let needed = (self.train + self.dev + self.test) as f64;
        if distinct < 2.0 * needed {
            return Err(Error::Config(format!(
                "vocabulary of {} content tokens with lengths {}..={} cannot supply {needed} distinct examples",
                content, self.min_len, self.max_len
            )));
        }
        if self.train == 0 {
            return Err(Error::Config("train split must be nonempty".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::synthetic(self.vocab_size)
    }

    /// Seeded bijection over content ids used by lookup-translate.
    pub fn lookup_table(&self) -> Vec<u32> {
        let content: Vec<u32> = (SPECIALS.len() as u32..self.vocab_size as u32).collect();
        let mut perm = content.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6c6f_6f6b_7570);
        perm.shuffle(&mut rng);
        let mut table: Vec<u32> = (0..self.vocab_size as u32).collect();
        for (a, b) in content.iter().zip(perm) {
            table[*a as usize] = b;
        }
        table
    }

    pub fn target(&self, src: &[u32], table: &[u32]) -> Vec<u32> {
        match self.task {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
            Task::Sort => {
                let mut t = src.to_vec();
                t.sort_unstable();
                t
            }
            Task::LookupTranslate => src.iter().map(|&t| table[t as usize]).collect(),
        }
    }

    /// Deterministic splits with pairwise-disjoint source sequences.
    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let table = self.lookup_table();
        let lo = SPECIALS.len() as u32;
        let hi = self.vocab_size as u32;
        let mut seen = HashSet::new();
        let mut draw = |n: usize| -> Vec<Pair> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let src: Vec<u32> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
                if seen.insert(src.clone()) {
                    let tgt = self.target(&src, &table);
                    out.push((src, tgt));
                }
            }
            out
        };
        let train = draw(self.train);
        let dev = draw(self.dev);
        let test = draw(self.test);
        Ok(Splits { train, dev, test })
    }
}

/// Read one tokenized file, one example per line.
pub fn read_lines(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| vocab.encode(l)).collect())
}

/// Read a parallel corpus from `src`/`tgt` files with equal line counts.
pub fn read_parallel(src: &Path, tgt: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let s = read_lines(src, vocab)?;
    let t = read_lines(tgt, vocab)?;
    if s.len() != t.len() {
        return Err(Error::Corrupt(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

pub fn write_lines(path: &Path, lines: &[Vec<u32>], vocab: &Vocab) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&vocab.decode(l));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `{dir}/{split}.src` and `{dir}/{split}.tgt` for every split.
pub fn write_splits(dir: &Path, splits: &Splits, vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, pairs) in splits.iter() {
        let (s, t): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        write_lines(&dir.join(format!("{name}.src")), &s, vocab)?;
        write_lines(&dir.join(format!("{name}.tgt")), &t, vocab)?;
    }
    vocab.save(&dir.join("vocab.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_round_trips_text() {
        let v = Vocab::synthetic(10).unwrap();
        assert_eq!(v.len(), 10);
        let ids = v.encode("a b zz f");
        assert_eq!(ids, vec![4, 5, UNK, 9]);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 6]), "a b");
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    #[test]
    fn reverse_targets_and_disjoint_splits() {
        let spec = TaskSpec::default();
        let s = spec.generate().unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (512, 64, 64));
        for (src, tgt) in &s.train {
            assert_eq!(tgt.iter().rev().copied().collect::<Vec<_>>(), *src);
            assert!((5..=12).contains(&src.len()));
        }
        let train: HashSet<_> = s.train.iter().map(|p| &p.0).collect();
        assert!(s.dev.iter().chain(&s.test).all(|p| !train.contains(&p.0)));
        assert_eq!(spec.generate().unwrap(), s);
    }

    #[test]
    fn lookup_translate_is_a_bijection() {
        let spec = TaskSpec {
            task: Task::LookupTranslate,
            ..TaskSpec::default()
        };
        let table = spec.lookup_table();
        let mut image: Vec<u32> = table[4..].to_vec();
        image.sort_unstable();
        assert_eq!(image, (4..32).collect::<Vec<_>>());
        let s = spec.generate().unwrap();
        for (src, tgt) in &s.train {
            assert!(src.iter().zip(tgt).all(|(a, b)| table[*a as usize] == *b));
        }
    }

    #[test]
    fn rejects_too_small_vocab() {
        let spec = TaskSpec {
            vocab_size: 5,
            ..TaskSpec::default()
        };
        assert!(matches!(spec.generate(), Err(Error::Config(_))));
        let spec = TaskSpec {
            vocab_size: 6,
            min_len: 1,
            max_len: 2,
            ..TaskSpec::default()
        };
        assert!(spec.generate().is_err());
    }
}
