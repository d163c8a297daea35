//! Selective language modeling at desk scale.
//!
//! The pipeline has three stages: train a reference model on clean text,
//! score every token of a training corpus with the reference model's loss,
//! then train a fresh model only on the tokens whose current loss most
//! exceeds their reference loss. Around that core sit the token-level
//! training-dynamics tools (trajectory fitting and the four-way loss
//! taxonomy) and the analysis reports.

pub mod analysis;
pub mod binio;
pub mod corpus;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod reference;
pub mod slm;

pub use binio::Digest32;
pub use error::{Error, Result};
