//! Equivariant encode-process-decode simulator for 2D deformable-body
//! collisions, with a material-point-method ground-truth generator.

// `!(x > 0.0)` is deliberate: NaN must fail positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod latent;
pub mod model;
pub mod mpm;
pub mod nn;
pub mod plot;
pub mod processor;
pub mod shapes;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
