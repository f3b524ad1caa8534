//! Identifiable latent dynamical systems.
//!
//! A sequential variational auto-encoder whose latent transition is split
//! into one network per latent coordinate, each driven by a single process
//! noise variable, with a conditional rational-quadratic spline flow as the
//! environment-dependent noise prior. Alongside the model live a synthetic
//! ground-truth world, the training loop, and the evaluation harness
//! (mean correlation coefficient, future prediction error, calibration,
//! ablations and adaptation).

pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
