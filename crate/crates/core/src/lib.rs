//! Attentive encoder-decoder toolkit: tensors with reverse-mode autodiff,
//! GRU/conditional-GRU layers, optimizers, beam search, BLEU and BPE.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar type for common use.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod subword;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, ParamKind, ParamStore, Var};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{Batch, ParallelCorpus, Vocabulary};
pub use decode::{beam_search, BeamConfig, Hypothesis};
pub use error::{Error, Result};
pub use init::RngState;
pub use metrics::{MetricName, MetricValue};
pub use model::{Model, ModelOptions, ModelType, NmtModel, RnnLm};
pub use optim::{OptimizerKind, OptimizerState};
pub use scalar::Scalar;
pub use subword::BpeModel;
pub use tensor::Tensor;
pub use trainer::Trainer;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type NmtModel32 = NmtModel<f32>;
pub type NmtModel64 = NmtModel<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
