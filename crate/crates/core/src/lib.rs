//! Multidomain few-shot engagement modelling.
//!
//! Binary engagement labels collected across many games are relabelled into
//! game-specific classes (`2 * game_id + y`), a single projection head
//! (dense + ReLU + L2 normalisation) is trained on frozen backbone embeddings
//! with a prototypical, matching or supervised-contrastive episodic objective,
//! and the result is evaluated episodically against a conventional binary
//! classifier trained on game-agnostic labels.

pub mod annotation;
pub mod baseline;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod projection;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod trainer;
mod vecops;

pub use error::{Error, Result};

/// Tool version stamped into every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
