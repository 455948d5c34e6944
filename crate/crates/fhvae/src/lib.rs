//! Factorized hierarchical VAE toolkit for learning domain-invariant
//! sequence features.
//!
//! The model factors variation in windowed frame sequences into a
//! segment-level latent (`z1`, varies freely across segments) and a
//! sequence-level latent (`z2`, tied to a per-sequence s-vector prior), and
//! trains with a discriminative objective that keeps s-vectors separated.
//! The crate covers the full loop: synthetic corpus generation, training
//! with early stopping, frame-aligned feature extraction, and
//! logistic-regression invariance probes.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod extract;
pub mod gaussian;
pub mod model;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
