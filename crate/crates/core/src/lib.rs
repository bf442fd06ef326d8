//! Multi-task contrastive retrieval training with spherical query calibration
//! and difficulty-aware task sampling.
//!
//! The engine is small enough to run on a laptop yet keeps every moving part
//! of the full system: a reverse-mode gradient tape, a hypernetwork that
//! predicts per-query low-rank adapters and an interpolation weight, a task
//! sampler driven by gradient-norm difficulty estimates, a synthetic
//! multi-dataset benchmark generator, and an exhaustive retrieval evaluator.

pub mod benchgen;
pub mod calibrator;
pub mod evaluator;
pub mod gradcheck;
pub mod numerics;
pub mod run;
pub mod sampler;
pub mod seeds;
pub mod trainer;

pub use numerics::NumericsError;
