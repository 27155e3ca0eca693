//! Weight-tied mixer forecaster with external attention over learned
//! slots, plus Harris Hawks dropout tuning and a random structural search.

pub mod data;
pub mod error;
pub mod hho;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod search;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Activation, Rng, Tape, Tensor, Var};
