//! Coordinated multimodal embedding spaces.
//!
//! Learns a shared embedding space over an arbitrary number of modalities
//! from precomputed per-modality feature files, using either a pairwise
//! contrastive objective or a similarity-regression objective, both with
//! missing-view masking. Ships with cross-modal retrieval metrics,
//! zero-shot classification, query/database enrichment, and a synthetic
//! dataset generator for end-to-end verification.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grad;
pub mod losses;
pub mod model;
pub mod optim;
pub mod similarity;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
