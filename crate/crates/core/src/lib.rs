//! Evidence-based multiple-choice question answering with multi-scale,
//! contextually self-attentive sentence embedding tensors scored by semantic
//! matching (aligned subspaces) and semantic association (cross subspaces).

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod qa;
pub mod retrieval;
pub mod scoring;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
