//! Metric-learning toolkit for re-identification style embeddings.
//!
//! The crate covers the full loop on vector data: distances and
//! normalization ([`geometry`]), contrastive and triplet losses with the
//! batch-all / batch-hard / batch-sample / batch-weighted weightings
//! ([`losses`]), PK batch construction ([`sampler`]), a small fully
//! connected embedding network trained with Adam ([`network`], [`optim`],
//! [`train`]), and retrieval evaluation under the cross-camera and
//! repeated-random-gallery protocols ([`eval`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Matrix, MetricKind};
