//! Concept-based training-data attribution on desk-scale language models.
//!
//! The crate trains small autoregressive models from scratch, fits concept
//! vectors (probes) and sparse autoencoders over their activations, builds an
//! EK-FAC approximation of the damped curvature with an exact dense oracle,
//! and scores training data with six attribution methods: influence functions
//! (IF), concept influence (CI), the explicit-kernel reference path (KERNEL),
//! the activation-gradient score (AGI), projection difference (PD), and
//! vector filter (VF). An evaluation harness generates synthetic
//! misalignment benchmarks, runs filter-and-retrain experiments, and reports
//! classification metrics, method correlations, and query timings.

pub mod attribution;
pub mod concepts;
pub mod convex;
pub mod curvature;
pub mod data;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod linalg;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod sae;
pub mod seeds;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
