//! Unsupervised decomposition of large point clouds into a union of
//! transformed, learnable prototype shapes.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
