//! Spectral attention over EMA filter banks for long-range time series
//! forecasting.

pub mod data;
pub mod ema;
pub mod error;
pub mod forecaster;
pub mod pipeline;
pub mod spectral;

pub use error::{Error, Result};
