//! Conditional decoder transformer over a patient's lab history.
//!
//! A sequence is a context token (sex, age, analyte), one token per prior
//! measurement (value, population state, elapsed time) and a query token
//! (requested future state, horizon). The output at the query position
//! parameterizes the distribution of the next value.

mod checkpoint;
mod config;
mod loss;
mod network;
mod params;
mod predict;
mod tokens;

use thiserror::Error;

use crate::analytes::AnalyteError;
use crate::tensor::TensorError;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    AgeEncoding, ContextToken, HeadKind, ModelConfig, StateEncoding, TimeEncoding, ValueEncoding, DEFAULT_QUANTILES,
};
pub use loss::{gaussian_nll, gaussian_nll_tape, pinball_loss, pinball_loss_tape};
pub use network::{forward, forward_hidden, forward_tape, Bound};
pub use params::ParamStore;
pub use predict::{norma_interval, predict, Distribution, Prediction, PredictiveDistribution};
pub use tokens::{age_bin, build_tokens, state_index, Denorm, HistoryToken, TokenSequence, N_AGE_BINS, WITHIN_SD_FLOOR};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("history is empty")]
    EmptyHistory,
    #[error("horizon must be finite and non-negative, got {0}")]
    BadHorizon(f64),
    #[error(transparent)]
    Analyte(#[from] AnalyteError),
    #[error("non-finite activation in layer {layer}: {source}")]
    NonFiniteLayer { layer: usize, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("interval requires a normal query state")]
    NotNormalQuery,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("checkpoint is untrained")]
    Untrained,
}
