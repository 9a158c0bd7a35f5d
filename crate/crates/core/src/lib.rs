//! Density-derivative-ratio estimation and the geometry built on it:
//! mode-seeking clustering, density ridge finding, KDE baselines, synthetic
//! data and evaluation metrics.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod linalg;
pub mod lsddr;
pub mod metrics;
pub mod mode_seeking;
pub mod ridge;
pub mod points;

pub use error::{Error, Result};
pub use points::PointSet;
