//! Weight-only int8 quantization.
//!
//! Every rank-2 tensor is quantized per row with a symmetric absmax scale:
//! `q = round(w / s)` in `[-127, 127]`, `s = max|row| / 127`. All-zero rows
//! use `s = 1`. Rank-1 tensors (biases, norm gains) stay f32. Inference
//! dequantizes on fetch, so activations remain floating point.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{ModelRef, ParamSource};
use crate::params::{ParamGroup, ParamStore, ShapeClass, TyingPlan};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum QTensor {
    Int8 {
        shape: Vec<usize>,
        codes: Vec<i8>,
        /// One scale per row.
        scales: Vec<f32>,
    },
    Float(Arc<Tensor>),
}

fn row_scale(row: &[f32]) -> f32 {
    let m = row.iter().fold(0f32, |a, v| a.max(v.abs()));
    if m == 0.0 {
        return 1.0;
    }
    let mut s = (m / 127.0).max(f32::MIN_POSITIVE);
    // Settle on a scale that survives dequantize -> requantize unchanged;
    // this usually takes zero or one adjustment.
    for _ in 0..8 {
        let next = ((s * 127.0) / 127.0).max(f32::MIN_POSITIVE);
        if next == s {
            break;
        }
        s = next;
    }
    s
}

impl QTensor {
    /// Quantize a rank-2 tensor row by row; other ranks are kept as f32.
    pub fn quantize(t: &Arc<Tensor>) -> Result<QTensor> {
        if !t.is_finite() {
            return Err(Error::InvalidInput("cannot quantize a tensor with non-finite values".into()));
        }
        if t.rank() != 2 {
            return Ok(QTensor::Float(t.clone()));
        }
        let cols = t.cols();
        let mut codes = Vec::with_capacity(t.numel());
        let mut scales = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let s = row_scale(row);
            scales.push(s);
            codes.extend(row.iter().map(|&w| (w / s).round().clamp(-127.0, 127.0) as i8));
        }
        debug_assert_eq!(codes.len(), t.rows() * cols);
        Ok(QTensor::Int8 {
            shape: t.shape().to_vec(),
            codes,
            scales,
        })
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            QTensor::Int8 { shape, .. } => shape,
            QTensor::Float(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn dequantize(&self) -> Arc<Tensor> {
        match self {
            QTensor::Float(t) => t.clone(),
            QTensor::Int8 { shape, codes, scales } => {
                let cols = shape[1];
                let data = codes
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| q as f32 * scales[i / cols])
                    .collect();
                Arc::new(Tensor::new(shape.clone(), data).expect("quantized shape"))
            }
        }
    }

    pub fn is_int8(&self) -> bool {
        matches!(self, QTensor::Int8 { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QGroup {
    pub name: String,
    pub class: ShapeClass,
    pub tensors: BTreeMap<String, QTensor>,
}

/// Parameter store with int8 weight matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedStore {
    groups: BTreeMap<String, QGroup>,
}

/// Serialized payload sizes in bytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SizeReport {
    /// Quantizable matrices stored as f32.
    pub weight_f32: usize,
    /// The same matrices as int8 codes.
    pub weight_int8: usize,
    /// Per-row f32 scales.
    pub scales: usize,
    /// Tensors kept in f32 either way.
    pub other_f32: usize,
}

impl SizeReport {
    pub fn float_total(&self) -> usize {
        self.weight_f32 + self.other_f32
    }

    pub fn int8_total(&self) -> usize {
        self.weight_int8 + self.scales + self.other_f32
    }

    /// int8 weight payload over the f32 weight payload, scales excluded.
    pub fn weight_ratio(&self) -> f64 {
        self.weight_int8 as f64 / self.weight_f32.max(1) as f64
    }

    pub fn scale_ratio(&self) -> f64 {
        self.scales as f64 / self.weight_f32.max(1) as f64
    }
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "weights_f32_bytes={}", self.weight_f32)?;
        writeln!(f, "weights_int8_bytes={}", self.weight_int8)?;
        writeln!(f, "scale_bytes={}", self.scales)?;
        writeln!(f, "other_f32_bytes={}", self.other_f32)?;
        writeln!(f, "total_f32_bytes={}", self.float_total())?;
        writeln!(f, "total_int8_bytes={}", self.int8_total())?;
        writeln!(f, "weight_ratio={:.4}", self.weight_ratio())?;
        write!(f, "total_ratio={:.4}", self.int8_total() as f64 / self.float_total().max(1) as f64)
    }
}

impl QuantizedStore {
    pub fn from_groups(groups: impl IntoIterator<Item = QGroup>) -> Self {
        QuantizedStore {
            groups: groups.into_iter().map(|g| (g.name.clone(), g)).collect(),
        }
    }

    /// Quantize every rank-2 tensor of `store`.
    pub fn quantize(store: &ParamStore) -> Result<Self> {
        let groups = store
            .groups()
            .map(|g| {
                let tensors = g
                    .tensors
                    .iter()
                    .map(|(n, t)| Ok((n.clone(), QTensor::quantize(t)?)))
                    .collect::<Result<_>>()?;
                Ok(QGroup {
                    name: g.name.clone(),
                    class: g.class,
                    tensors,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_groups(groups))
    }

    pub fn groups(&self) -> impl Iterator<Item = &QGroup> {
        self.groups.values()
    }

    pub fn get(&self, key: &str) -> Result<&QTensor> {
        key.split_once('/')
            .and_then(|(g, t)| self.groups.get(g)?.tensors.get(t))
            .ok_or_else(|| Error::Config(format!("parameter `{key}` missing from store")))
    }

    pub fn dequantize(&self) -> ParamStore {
        ParamStore::from_groups(self.groups.values().map(|g| ParamGroup {
            name: g.name.clone(),
            class: g.class,
            tensors: g.tensors.iter().map(|(n, t)| (n.clone(), t.dequantize())).collect(),
        }))
    }

    pub fn size_report(&self) -> SizeReport {
        let mut r = SizeReport::default();
        for t in self.groups.values().flat_map(|g| g.tensors.values()) {
            match t {
                QTensor::Int8 { codes, scales, .. } => {
                    r.weight_f32 += 4 * codes.len();
                    r.weight_int8 += codes.len();
                    r.scales += 4 * scales.len();
                }
                QTensor::Float(t) => r.other_f32 += 4 * t.numel(),
            }
        }
        r
    }

    pub fn check_layout(&self, config: &ModelConfig, plan: &TyingPlan) -> Result<()> {
        self.dequantize().check_layout(config, plan)
    }
}

impl ParamSource<f32> for QuantizedStore {
    fn fetch(&self, key: &str) -> Result<Arc<Tensor>> {
        Ok(self.get(key)?.dequantize())
    }
}

/// A model whose weights are int8.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub plan: TyingPlan,
    pub store: QuantizedStore,
}

impl QuantizedModel {
    pub fn view(&self) -> ModelRef<'_, f32> {
        ModelRef {
            config: &self.config,
            plan: &self.plan,
            source: &self.store,
        }
    }
}
