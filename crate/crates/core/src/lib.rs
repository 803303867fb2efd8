//! Constrained clustering of image patches.
//!
//! The crate covers the whole pipeline: patch extraction and filtering,
//! automatic must-link generation from patch geometry, depth and image
//! correspondences, confidence-weighted constrained k-means, triplet metric
//! learning on cluster pseudo-labels, and the evaluation metrics used to
//! judge the result. A synthetic scene generator provides labeled data for
//! every stage.

pub mod cluster;
pub mod constraints;
pub mod embed;
mod error;
pub mod eval;
pub mod filter;
pub mod formats;
pub mod image;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod unionfind;

pub use error::{Error, Result};
pub use model::{
    ClusterModel, ConstraintSet, EmbeddingSet, Eye, FilterClass, HardLink, LinkSource, MetricModel, PatchRecord,
    SoftLink, Split, Transform,
};
