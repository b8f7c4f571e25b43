//! Two-step knowledge distillation at desk scale.
//!
//! A pretrained teacher encoder is adapted by linear probing, then compact
//! students are trained from scratch or from pretrained weights, either by
//! plain finetuning or under a temperature-scaled distillation objective.
//! Everything sits on a small define-by-run autodiff engine computing in `f64`.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, GenSpec, Split};
pub use error::{Error, ErrorClass, Result};
pub use eval::RunReport;
pub use nn::{Model, ModelSpec};
pub use objectives::{DistillConfig, KlDirection};
pub use optim::{AdamW, CosineSchedule};
pub use tensor::Tensor;
pub use training::{InitKind, StrategyKind, TrainConfig};
