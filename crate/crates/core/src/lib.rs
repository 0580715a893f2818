pub mod augment;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod hydro;
pub mod metrics;
pub mod models;
pub mod raster;
pub mod seeds;
pub mod synth;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
