//! Parameter-efficient encoder-decoder Transformer: tensors and reverse-mode
//! autodiff, tied parameter stores, the seq2seq model, layer adaptation, cost
//! analysis, training with distillation, decoding and int8 quantization.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod decode;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod quant;
pub mod repro;
pub mod tensor;
pub mod train;

pub use config::{CustomTying, DecoderStyle, LayerAdapt, ModelConfig, TyingScheme};
pub use error::{Error, Result};
pub use graph::{Activation, AttentionSpec, Gradients, Graph, Var};
pub use params::{init_params, store_layout, Binding, ModuleKind, ParamGroup, ParamStore, Part, ShapeClass, Slot, Stack, TyingPlan};
pub use tensor::{Scalar, Tensor};
pub use data::{Task, TaskSpec, Vocab, BOS, EOS, PAD, UNK};
pub use model::{Batch, DecoderCache, Forward, Model, ModelRef, ParamSource};
pub use decode::{decode, decode_all, DecodeConfig, Hypothesis};
pub use quant::{QTensor, QuantizedModel, QuantizedStore, SizeReport};
pub use checkpoint::{Checkpoint, Weights};
pub use train::{teacher_forced, TfStats, TrainConfig, TrainOutcome};
pub use experiment::{ExperimentConfig, Manifest, RunDir};
