//! Few-shot class-incremental learning through model inversion guided by
//! anchors in feature space.
//!
//! A base session trains a conv backbone with a cosine classifier. Each
//! class is summarised by a handful of anchor points in feature space. In
//! later sessions, synthetic inputs are optimised until their embeddings
//! land on the stored anchors, and those samples are replayed while the
//! last backbone layer and the new class weights are finetuned.

pub mod anchors;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod model;
pub mod seed;
pub mod trainer;

pub use error::{CoreError, Result};
