//! Discrete-time survival transformer for longitudinal visit-sequence
//! records.

pub mod autodiff;
pub mod checkpoint;
pub mod cohort;
pub mod embeddings;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod survival;
pub mod tensor;

pub use error::{Result, StrafeError};
pub use tensor::{Mode, Real, Tensor};
