//! Anchor-free toy object detector built around prediction pooling.
//!
//! The detector labels feature-map locations inside a shrunken central region
//! of each ground-truth box as positive, sum-pools the class probabilities of
//! one object's positive features into a single prediction for the focal loss,
//! and at inference lets highly overlapping detections of the same class raise
//! each other's scores before class-aware NMS.
//!
//! The crate is organized along the pipeline:
//!
//! - [`geometry`]: axis-aligned box arithmetic (IoU, shrinking, containment)
//! - [`assignment`]: pyramid-level assignment and positive/negative labeling
//! - [`losses`]: sum-pooled focal loss and smooth-L1 regression with exact gradients
//! - [`model`]: patch-descriptor detection head with manual backprop and SGD
//! - [`aggregation`]: decode, score voting and class-aware NMS
//! - [`data`]: synthetic shape scenes and dataset persistence
//! - [`eval`]: COCO-style average precision and responsible-feature heatmaps
//! - [`train`]: batched training loop with deterministic gradient reduction
//!
//! Batch operations run on rayon by default; building with
//! `--no-default-features` switches them to sequential execution.

pub mod aggregation;
pub mod assignment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod num;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{BBox, Point};
