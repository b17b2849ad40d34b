//! Multi-target multi-camera tracking by correlation clustering.
//!
//! Detections with appearance embeddings are grouped into identities in
//! three sliding-window passes (one-second tracklets, single-camera
//! trajectories, multi-camera identities). Each pass scores pairs with
//! appearance, linear-motion and time-decay correlations and solves a
//! correlation clustering problem.
//!
//! Alongside the tracker the crate carries the adaptive weighted triplet
//! loss used to learn embeddings, identity-aware evaluation (IDF1, IDP,
//! IDR, rank-k, mAP) and a synthetic world generator for ground truth.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clustering;
pub mod config;
pub mod correlation;
pub mod error;
pub mod evalkit;
pub mod loss;
pub mod model;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
