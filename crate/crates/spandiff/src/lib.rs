//! Aspect-term extraction and sentiment classification by iterative span
//! refinement.
//!
//! Gold aspect spans are mapped to continuous coordinates, corrupted with
//! scheduled Gaussian noise, and a syntax-aware denoising network learns to
//! recover them; at inference a deterministic reverse chain turns pure noise
//! into (span, polarity) predictions. The crate ships the full pipeline:
//! corpus loading, the diffusion math, the network, training, sampling, a
//! BIO sequence-labeling baseline, and micro-F1 evaluation.

pub mod baseline;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod nn;
pub mod schedule;
pub mod syntanet;
pub mod training;

pub use error::{Result, SpandiffError};
