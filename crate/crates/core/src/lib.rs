pub mod archive;
pub mod config;
pub mod datasets;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod sample;
pub mod schedule;
pub mod tape;
pub mod textspace;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
