//! Experiment configuration files, command-line overrides and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::TaskSpec;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Everything one run needs, stored as a single TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub task: TaskSpec,
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig) -> Self {
        ExperimentConfig {
            out_dir: default_out_dir(),
            model,
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            task: TaskSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.task.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Apply `(dotted.key, value)` overrides; see [`apply_overrides`].
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        apply_overrides(self, overrides)
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string
/// (so `--task.task reverse` works without quotes).
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set dotted keys on any serializable config and re-validate it through
/// deserialization, so unknown keys and ill-typed values are rejected.
pub fn apply_overrides<C: Serialize + DeserializeOwned>(config: &C, overrides: &[(String, String)]) -> Result<C> {
    let mut root = toml::Table::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override key `{key}`")));
        }
        let (last, path) = parts.split_last().expect("nonempty key");
        let mut table = &mut root;
        for p in path {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
        }
        table.insert(last.to_string(), parse_value(raw));
    }
    toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(format!("override rejected: {e}")))
}

/// Split `--a.b value` pairs out of a flat argument list.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--section.key value`, found `{a}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("override `{a}` lacks a value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Reproducibility record written next to every run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Input file → blob hash.
    pub inputs: BTreeMap<String, String>,
    /// Hash of the command, seed, config snapshot and input hashes.
    pub content_hash: String,
    pub config: toml::Table,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let config = toml::Table::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
        let mut hashes = BTreeMap::new();
        for p in inputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            hashes.insert(p.display().to_string(), blob_hash(&bytes));
        }
        let mut key = format!("command={command}\nseed={seed}\n{config}\n");
        for (p, h) in &hashes {
            let name = Path::new(p).file_name().map_or(p.clone(), |n| n.to_string_lossy().into_owned());
            key.push_str(&format!("input {name} {h}\n"));
        }
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs: hashes,
            content_hash: blob_hash(key.as_bytes()),
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Corrupt(format!("bad manifest {}: {e}", path.display())))
    }
}

/// Fixed run-directory layout.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.log"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerAdapt;

    fn sample() -> ExperimentConfig {
        let mut m = ModelConfig::edgeformer(64);
        m.vocab_size = 32;
        m.heads = 4;
        ExperimentConfig::new(m)
    }

    #[test]
    fn toml_round_trip() {
        let c = sample();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = sample().to_toml().unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let o = vec![("model.d_modle".to_string(), "32".to_string())];
        assert!(sample().with_overrides(&o).is_err());
        let o = vec![("train.lr".to_string(), "fast".to_string())];
        assert!(sample().with_overrides(&o).is_err());
    }

    #[test]
    fn overrides_apply() {
        let args: Vec<String> = ["--model.d_model", "128", "--task.task=copy", "--model.la.kind", "adapter", "--model.la.rank", "8"]
            .map(String::from)
            .to_vec();
        let o = parse_override_args(&args).unwrap();
        let c = sample().with_overrides(&o).unwrap();
        assert_eq!(c.model.d_model, 128);
        assert_eq!(c.task.task, crate::data::Task::Copy);
        assert_eq!(c.model.la, LayerAdapt::adapter(8));
        assert!(parse_override_args(&["--x".to_string()]).is_err());
        assert!(parse_override_args(&["x".to_string(), "1".to_string()]).is_err());
    }

    #[test]
    fn partial_sections_use_defaults() {
        let c = sample();
        let mut t = toml::Table::try_from(&c).unwrap();
        t.insert("task".into(), toml::Value::Table(toml::from_str("task = \"sort\"").unwrap()));
        let back: ExperimentConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(back.task.train, TaskSpec::default().train);
        assert_eq!(back.task.task, crate::data::Task::Sort);
    }

    #[test]
    fn blob_hash_format() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn manifest_is_stable_and_input_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, "1 2 3\n").unwrap();
        let a = Manifest::new("train", &sample(), 7, &[&f]).unwrap();
        let b = Manifest::new("train", &sample(), 7, &[&f]).unwrap();
        assert_eq!(a, b);
        let p = dir.path().join("manifest.toml");
        a.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), a);
        fs::write(&f, "1 2 4\n").unwrap();
        let c = Manifest::new("train", &sample(), 7, &[&f]).unwrap();
        assert_ne!(a.content_hash, c.content_hash);
    }
}
