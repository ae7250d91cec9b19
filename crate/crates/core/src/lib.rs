//! Desk-scale transformer-encoder laboratory for position-embedding methods.
//!
//! Every position method is a pluggable attention-logit kernel that runs on
//! a small reverse-mode tape, so each one can be checked against a naive
//! scalar oracle and against finite differences.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tasks;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
