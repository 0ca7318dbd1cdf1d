//! Gated-attention multiple-instance learning with bag-level
//! out-of-distribution scoring.

pub mod error;
pub mod bagkit;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod scorers;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tape, Tensor, Var};
pub use model::{BagForward, EmbedderConfig, MilModel, ModelConfig, Prediction};
