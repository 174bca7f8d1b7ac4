//! Causal effects of continuous, time-varying exposures on repeated
//! outcomes: stabilised-weight marginal structural models, G-estimation of
//! structural nested mean models, instrument-based G-estimation, regime
//! contrasts, and a Monte Carlo harness with synthetic designs.

pub mod cli;
pub mod effects;
pub mod error;
pub mod estimand;
pub mod gest;
pub mod iv;
pub mod mc;
pub mod msm;
pub mod numkit;
pub mod panel;
pub mod simgen;
pub mod weights;

pub use error::{Error, ErrorKind, Result};
