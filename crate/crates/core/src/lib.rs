//! Adaptive open-loop control of a deformable mirror with online influence
//! identification. The library pairs a recursive least-squares tracker for a
//! slowly varying influence matrix with a bounded least-squares voltage
//! solver, and ships a synthetic plant to exercise both.

pub mod bvls;
pub mod config;
pub mod control;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod grid;
pub mod matio;
pub mod plant;
pub mod report;
pub mod zernike;

pub use error::{Error, ErrorCategory, Result};
