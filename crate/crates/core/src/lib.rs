//! End-to-end (K+1)-way out-of-scope intent detection.
//!
//! A classifier over K known intents plus one out-of-scope class is trained
//! on inliers mixed with two kinds of pseudo outliers: synthetic convex
//! combinations of inlier features from different classes, and samples from
//! an open-domain sentence pool. The trained classifier is applied directly
//! at test time, with no threshold.

pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod oose;
pub mod optim;
pub mod outliers;
pub mod rng;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
