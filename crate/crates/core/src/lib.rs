//! Preference alignment for generative retrieval over hierarchical semantic IDs.
//!
//! The crate covers the whole desk-scale pipeline: residual K-means semantic
//! IDs ([`sid`]), a synthetic session simulator ([`datagen`]), a tiny
//! decoder-only model trained through a small reverse-mode autodiff engine
//! ([`autodiff`], [`model`]), the alignment objectives ([`losses`]), the
//! two-stage trainer ([`train`]) and a decode-and-score harness ([`eval`]).

pub mod autodiff;
pub mod datagen;
pub mod eval;
pub mod losses;
pub mod model;
pub mod par;
pub mod provenance;
pub mod sid;
pub mod train;
