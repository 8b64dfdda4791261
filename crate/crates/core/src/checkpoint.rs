//! Checkpoint container.
//!
//! Layout: the magic line `EDGEFORMER-CKPT 1\n`, a little-endian `u64`
//! header length, a TOML header (model config, vocabulary, tying manifest),
//! then one record per tensor:
//!
//! ```text
//! u32 len, group name | u32 len, class tag | u32 len, tensor name |
//! u32 rank | rank × u64 dims | u8 dtype | payload
//! ```
//!
//! dtype 0 is `numel × f32`; dtype 1 (rank 2 only) is `rows × f32` scales
//! followed by `numel × i8` codes. All integers and floats little-endian.
//!
//! Loading rebuilds the tying plan from the config and rejects the file if
//! the stored manifest, group classes or shapes disagree.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::model::ModelRef;
use crate::params::{store_layout, ParamStore, TyingPlan};
use crate::quant::{QGroup, QTensor, QuantizedModel, QuantizedStore};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"EDGEFORMER-CKPT 1\n";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    plan: PlanHeader,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanHeader {
    scheme: String,
    bindings: BTreeMap<String, String>,
}

fn manifest(plan: &TyingPlan) -> PlanHeader {
    PlanHeader {
        scheme: plan.scheme.clone(),
        bindings: plan.bindings.iter().map(|(s, b)| (s.to_string(), b.to_string())).collect(),
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Float or int8 parameters.
#[derive(Clone, Debug)]
pub enum Weights {
    Float(ParamStore),
    Int8(QuantizedStore),
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub plan: TyingPlan,
    pub weights: Weights,
    pub vocab: Option<Vocab>,
}

impl Checkpoint {
    pub fn view(&self) -> ModelRef<'_, f32> {
        let source: &dyn crate::model::ParamSource<f32> = match &self.weights {
            Weights::Float(s) => s,
            Weights::Int8(q) => q,
        };
        ModelRef {
            config: &self.config,
            plan: &self.plan,
            source,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.weights, Weights::Int8(_))
    }

    /// The float model; int8 checkpoints cannot be trained further.
    pub fn into_model(self) -> Result<Model<f32>> {
        match self.weights {
            Weights::Float(store) => Ok(Model {
                config: self.config,
                plan: self.plan,
                store,
            }),
            Weights::Int8(_) => Err(Error::InvalidInput("checkpoint holds int8 weights; a float model is required".into())),
        }
    }
}

fn write(config: &ModelConfig, plan: &TyingPlan, groups: &[QGroup], vocab: Option<&Vocab>) -> Result<Vec<u8>> {
    let header = Header {
        model: config.clone(),
        vocab: vocab.map(|v| v.content_ids().map(|i| v.token(i).unwrap().to_string()).collect()),
        plan: manifest(plan),
        tensors: groups.iter().map(|g| g.tensors.len()).sum(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("cannot serialize header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    for group in groups {
        for (name, t) in &group.tensors {
            put_str(&mut buf, &group.name);
            put_str(&mut buf, &group.class.tag());
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &dim in t.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            match t {
                QTensor::Float(t) => {
                    buf.push(0);
                    for v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                QTensor::Int8 { codes, scales, .. } => {
                    buf.push(1);
                    for v in scales {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    buf.extend(codes.iter().map(|&c| c as u8));
                }
            }
        }
    }
    Ok(buf)
}

fn float_groups(store: &ParamStore) -> Vec<QGroup> {
    store
        .groups()
        .map(|g| QGroup {
            name: g.name.clone(),
            class: g.class,
            tensors: g.tensors.iter().map(|(n, t)| (n.clone(), QTensor::Float(t.clone()))).collect(),
        })
        .collect()
}

/// Serialize a model (and optionally its vocabulary).
pub fn to_bytes(model: &Model<f32>, vocab: Option<&Vocab>) -> Result<Vec<u8>> {
    write(&model.config, &model.plan, &float_groups(&model.store), vocab)
}

/// Serialize an int8 model.
pub fn quantized_to_bytes(model: &QuantizedModel, vocab: Option<&Vocab>) -> Result<Vec<u8>> {
    let groups: Vec<QGroup> = model.store.groups().cloned().collect();
    write(&model.config, &model.plan, &groups, vocab)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Corrupt("non-UTF-8 name in checkpoint".into()))
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn bytes_for(n: usize, width: usize) -> Result<usize> {
    n.checked_mul(width).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))
}

/// Parse any checkpoint, float or int8.
pub fn read(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC) {
        return Err(Error::Corrupt("not an edgeformer checkpoint (bad magic)".into()));
    }
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Corrupt(format!("bad checkpoint header: {e}")))?;
    let config = header.model;
    config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    let plan = TyingPlan::build(&config).map_err(|e| Error::Corrupt(e.to_string()))?;
    let stored = header.plan;
    let expected = manifest(&plan);
    if stored.scheme != expected.scheme || stored.bindings != expected.bindings {
        return Err(Error::Corrupt("stored tying manifest does not match the configuration".into()));
    }
    let layout: BTreeMap<String, _> = store_layout(&config, &plan).into_iter().collect();
    let mut groups: BTreeMap<String, QGroup> = BTreeMap::new();
    let mut any_int8 = false;
    for _ in 0..header.tensors {
        let group = r.str()?.to_string();
        let tag = r.str()?.to_string();
        let name = r.str()?.to_string();
        let class = *layout
            .get(&group)
            .ok_or_else(|| Error::Corrupt(format!("unexpected group `{group}`")))?;
        if class.tag() != tag {
            return Err(Error::Corrupt(format!("group `{group}` tagged {tag}, expected {class}")));
        }
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Corrupt(format!("tensor `{group}/{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
        let t = match r.take(1)?[0] {
            0 => {
                let data = f32s(r.take(bytes_for(numel, 4)?)?);
                QTensor::Float(Arc::new(Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?))
            }
            1 if rank == 2 => {
                any_int8 = true;
                let scales = f32s(r.take(bytes_for(shape[0], 4)?)?);
                if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::Corrupt(format!("tensor `{group}/{name}` has an invalid scale")));
                }
                let codes = r.take(numel)?.iter().map(|&b| b as i8).collect();
                QTensor::Int8 { shape, codes, scales }
            }
            d => return Err(Error::Corrupt(format!("tensor `{group}/{name}` has unknown dtype {d} for rank {rank}"))),
        };
        let g = groups.entry(group.clone()).or_insert_with(|| QGroup {
            name: group.clone(),
            class,
            tensors: BTreeMap::new(),
        });
        if g.tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor `{group}/{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after the last record", buf.len() - r.pos)));
    }
    let store = QuantizedStore::from_groups(groups.into_values());
    store
        .check_layout(&config, &plan)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let weights = if any_int8 {
        Weights::Int8(store)
    } else {
        Weights::Float(store.dequantize())
    };
    let vocab = header
        .vocab
        .map(Vocab::new)
        .transpose()
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(Checkpoint {
        config,
        plan,
        weights,
        vocab,
    })
}

/// Parse a float checkpoint produced by [`to_bytes`].
pub fn from_bytes(buf: &[u8]) -> Result<(Model<f32>, Option<Vocab>)> {
    let ck = read(buf)?;
    let vocab = ck.vocab.clone();
    Ok((ck.into_model()?, vocab))
}

pub fn save(path: &Path, model: &Model<f32>, vocab: Option<&Vocab>) -> Result<()> {
    fs::write(path, to_bytes(model, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn save_quantized(path: &Path, model: &QuantizedModel, vocab: Option<&Vocab>) -> Result<()> {
    fs::write(path, quantized_to_bytes(model, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model<f32>, Option<Vocab>)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Load a float or int8 checkpoint.
pub fn load_any(path: &Path) -> Result<Checkpoint> {
    read(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
