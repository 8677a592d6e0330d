//! Cache reuse and trajectory-consistent calibration for a toy transformer
//! denoiser.

pub mod cache;
pub mod calibration;
pub mod config;
pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod pack;
pub mod rng;
pub mod schedule;
pub mod trajectory;

pub use error::{Error, Result};
