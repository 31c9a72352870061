pub mod boxes;
pub mod commands;
pub mod config;
pub mod error;
pub mod lmt;
pub mod params;
pub mod raster;
pub mod synth;
pub mod train;

pub use commands::run;
pub use error::{CliError, Result};
