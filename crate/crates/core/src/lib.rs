//! Interpretable-by-design multimodal classification with cross-modal
//! rationale transfer.
//!
//! Pipeline: a joint text–image transformer encoder with a token-level
//! rationale head and an auxiliary class head is trained jointly; predicted
//! text rationales are transferred onto image patches through an optimal
//! transport plan; a second classifier is trained and evaluated on
//! rationale-masked inputs only.

pub mod autograd;
pub mod cli;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod masking;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod rationale;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
