//! Scene-graph aided radiology report generation, desk scale.
//!
//! The crate covers the whole pipeline: a patch-level visual backbone, a
//! memory-aided region selector with per-category attribute heads, a
//! scene-graph encoder with adjacency-masked attention, an autoregressive
//! report decoder with subgraph-level cross-attention, abnormality-aware
//! auxiliary losses, a synthetic dataset generator, training with ablation
//! toggles, and text/clinical metrics.
//!
//! All numerics are generic over [`scalar::Scalar`]; `f32` is the training
//! default and `f64` backs gradient checking and oracles. Concrete aliases
//! for both live at the crate root.

pub mod abnormal;
pub mod attn;
pub mod backbone;
pub mod builder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod scene_graph;
pub mod tape;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mat32 = mat::Mat<f32>;
pub type Mat64 = mat::Mat<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
