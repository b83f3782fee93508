//! Prototype-guided attention pipeline for multi-species plot
//! identification on a synthetic quadrat corpus.
//!
//! The pipeline runs in stages, each persisted so later stages are
//! reproducible from disk: corpus generation, frozen-backbone embedding,
//! k-means species prototypes plus a linear classifier, training a small
//! transformer to reconstruct the prototype matrix, attention aggregation,
//! and two classification heuristics scored with per-transect mean F1.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod fileio;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod prototypes;
pub mod segvit;
pub mod synthcorpus;
pub mod trainer;
