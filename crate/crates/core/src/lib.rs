pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod instancing;
pub mod metrics;
pub mod optim;
pub mod persistence;
pub mod schedules;
pub mod toydata;
pub mod train;

pub use error::{Error, Result};
