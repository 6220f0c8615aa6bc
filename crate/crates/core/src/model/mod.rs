//! The sequential convolutional network.

pub mod block;
pub mod config;
pub mod forward;
pub mod params;

pub use config::{BieConfig, FusionMode, MfaConfig, ModelConfig};
pub use forward::{
    extract, mfa_forward, num_windows, scn_forward, stage_templates, SequenceFeature,
};
pub use params::{BoundParams, ScnParams};
