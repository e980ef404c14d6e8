//! Multi-intent attribute-aware text matching (MIM), built from scratch.
//!
//! A cross-encoder reads a query and a candidate together with their
//! attributes. Each attribute gets an importance gate that sharpens or
//! flattens the attention paid to its words. The attribute states of each
//! side are pooled into a few intents, and the match head attends over the
//! intents of both sides to score the pair.
//!
//! Module map:
//!
//! * [`tensor`]: tensors, the autodiff tape, Adam, checkpoints, gradient checks.
//! * [`data`]: attributed pairs, the synthetic corpus, dataset files, batching.
//! * [`encoder`]: token layout and the gated transformer encoder.
//! * [`intents`]: intent extraction with its distribution and KL losses.
//! * [`matcher`]: intent attention, the match head and the mask task.
//! * [`model`]: the full model, its parameters and ablation switches.
//! * [`harness`]: training, evaluation, metrics, ablations and sweeps.

pub mod data;
pub mod encoder;
pub mod harness;
pub mod intents;
pub mod matcher;
pub mod model;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("layout: {0}")]
    Layout(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::Tensor(tensor::TensorError::NonFinite { .. })
                | Error::Tensor(tensor::TensorError::Degenerate { .. })
                | Error::Tensor(tensor::TensorError::Domain { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
