//! Sequential convolutional network (SCN) for gait recognition.

pub mod cli;
pub mod config;
pub mod config_value;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod pipeline;
pub mod templates;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
