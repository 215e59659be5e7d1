//! Low-rank and sparse soft-target generation for classifier retraining.
//!
//! A classifier trained on hard labels produces posteriors on its training
//! data. Those posteriors are grouped by class and enhanced, either by
//! projection onto per-class eigenposteriors or by sparse reconstruction over
//! per-class dictionaries, and the enhanced posteriors become soft targets for
//! training a fresh classifier. The [`pipeline`] module runs the full ladder
//! of systems on a synthetic corpus, including augmentation with unlabeled
//! pools through forward passes.

pub mod cli;
pub mod eigenposterior;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod posterior;
pub mod rng;
pub mod softnet;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
