//! Quantitative myocardial perfusion analysis.
//!
//! Forward tracer-kinetic simulation with the two-compartment exchange
//! model, signal-to-concentration conversion for saturation-recovery
//! spoiled gradient echo acquisitions, least-squares and Bayesian kinetic
//! parameter inference, RPCA-based motion correction and segmental
//! diagnostic analysis.

pub mod analysis;
pub mod bayes;
pub mod cli;
pub mod config;
pub mod curve;
pub mod error;
pub mod image;
pub mod io;
pub mod moco;
pub mod model;
pub mod nlls;
pub mod phantom;
pub mod pipeline;
pub mod rpca;
pub mod seed;
pub mod signal;

pub use curve::{CurveKind, SampledCurve};
pub use error::{Error, Result};
pub use model::{KineticParams, PhysioConstants};
