//! Temporal-spatial decoupled multimodal regression.
//!
//! Each modality is split into an order-sensitive temporal stream and a
//! permutation-invariant spatial stream. The two streams are aligned across
//! modalities with block-diagonal masked attention, regularized for purity and
//! decorrelation, and fused by an instance-wise gate.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fcca;
pub mod model;
pub mod params;
pub mod recouple;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use config::RunConfig;
pub use data::{DatasetSplit, GeneratorConfig, Modality, ModalitySequence, Sample};
pub use error::{Error, Result};
pub use model::{Ablation, Fusion, Model};
pub use params::{ParamId, ParamStore};
pub use tensor::{grad_check, Gradients, Tape, Tensor, TensorError, Var};
pub use trainer::{LossReport, LossWeights, MetricReport, TrainLog};
