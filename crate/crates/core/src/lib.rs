//! Desk-scale laboratory for latent-memory sentence VAEs.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), a
//! transformer VAE whose decoder is conditioned through per-layer memory
//! slots ([`vae`]), invertible flows bridging external embeddings into the
//! latent space ([`flow`]), vector quantisation ([`vq`]), latent geometry
//! tools ([`geometry`]), disentanglement metrics ([`metrics`]), a latent
//! inference head ([`inference`]) and evaluation utilities ([`eval`]).

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod vae;
pub mod vq;

pub use error::{Error, Result};
