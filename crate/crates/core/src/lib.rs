//! Adversarially robust low-rank adaptation of a small dual-encoder retrieval
//! model.
//!
//! The crate is self-contained: a reverse-mode autodiff tape over dense `f64`
//! tensors, a synthetic paired-view dataset, a two-tower MLP encoder, LoRA
//! adapters with k-means initialization and alignment, input-space attacks,
//! adversarial adaptation and Recall@K evaluation.

pub mod adapter;
pub mod attack;
pub mod autodiff;
pub mod container;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use adapter::{AdapterSet, AlignParams, AlignReport, InitKind, LayerId, LoraAdapter, Tower};
pub use attack::{AttackFamily, AttackSpec};
pub use dataset::{Dataset, DatasetSplit, GeneratorParams, SplitKind};
pub use encoder::{ArchConfig, DualEncoder};
pub use error::{Error, Result};
pub use eval::{Condition, Direction, EvalOptions, RetrievalReport};
pub use model::{ModelView, TunableState};
pub use tensor::Tensor;
pub use trainer::{AdaptConfig, Method, PretrainConfig, Toggles, TrainLog};
