//! Density-matrix kernel density estimation, classification and regression
//! built on random Fourier features.

pub mod datasets;
pub mod density_ops;
pub mod dmkdc;
pub mod dmkde;
pub mod error;
pub mod experiments;
mod factor_params;
pub mod feature_maps;
pub mod kde;
pub mod linalg;
pub mod model_io;
pub mod qmc;
pub mod qmr;
pub mod seed;
pub mod training;

pub use error::{Error, ErrorKind, Result};
