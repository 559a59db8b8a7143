//! Person re-identification with a three-branch metric-learning network.
//!
//! A shared convolutional backbone produces a feature map `f_b`. Three heads
//! read it: a bidirectional LSTM over the row-pooled slices (head to foot)
//! feeding an identity classifier, a globally pooled FC feature feeding a
//! second classifier, and a parameter-free global pooling `f_m` trained with
//! the batch-hard triplet loss. `f_m` is the retrieval descriptor.
//!
//! Around the network the crate provides PK batch sampling, augmentation,
//! Market-1501 style dataset ingestion, a procedural synthetic dataset,
//! CMC/mAP evaluation, and a resumable Adam training loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod train;

pub use error::{Error, Result};
