//! Representation-aligned, layer-wise model merging.
//!
//! The pipeline: run a small transformer over a task's data and pool each
//! layer's hidden states into one vector per sample ([`extract`]); pick the
//! samples nearest to k-means centers as a typical set ([`typical`]); compare
//! how several same-architecture models represent those samples, layer by
//! layer ([`similarity`]); softmax the similarities into per-layer merge
//! weights and interpolate parameters group by group ([`merge`]).
//! [`bench`] wraps the whole thing in a desk-scale continual-learning
//! scenario.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod extract;
pub mod kmeans;
pub mod merge;
pub mod model;
pub mod similarity;
pub mod tensor;
pub mod typical;

pub use error::{Error, ParseError, Result};
