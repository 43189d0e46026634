//! Multilevel logistic meta-regression of reported treatment-effect estimates.
//!
//! The crate covers the whole pipeline from raw estimates to reportable
//! quantities:
//!
//! * [`domain`]: ingestion, t-statistics, dichotomised responses, design matrices.
//! * [`network`]: the co-authorship influence matrix between studies.
//! * [`density`]: kernel density curves and density-discontinuity (manipulation) tests.
//! * [`glmm`]: maximum likelihood for the random-intercept logit, with independent
//!   or SAR-correlated study effects.
//! * [`inference`]: predicted probabilities and contrasts with delta-method intervals.
//! * [`simulate`]: synthetic literatures with known ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod density;
pub mod domain;
pub mod error;
pub mod glmm;
pub mod inference;
pub mod network;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use nalgebra;
