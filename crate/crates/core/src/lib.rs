//! Asynchronous memory-augmented depth estimation: a slow foundation model
//! refreshes a feature memory that a fast encoder keeps current between refreshes.

pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod modulator;
pub mod projector;
pub mod runtime;
pub mod smu;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
