//! Dense network with per-task heads and domain discriminators, trained by
//! explicit reverse-mode differentiation. All arithmetic is `f64`.

mod checkpoint;
mod dense;
mod gradcheck;
mod model;
mod optim;

use thiserror::Error;

pub use checkpoint::{ModelCheckpoint, RngState, CHECKPOINT_SCHEMA};
pub use dense::{leaky_relu, logistic, Dense, LEAKY_SLOPE};
pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheckReport, EPS_RANGE, RELATIVE_FLOOR};
pub use model::{
    Architecture, DiscForward, Discriminator, Discriminators, Forward, Generator, Gradients,
    ModelParams, ParamBlock, Seeds,
};
pub use optim::{Adam, OptimizerState, RmsProp, StepSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("category {0} has no discriminator (not a common category)")]
    NotCommonCategory(usize),
    #[error("model has no holistic discriminator")]
    NoHolisticDiscriminator,
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
}
