//! Spatio-temporal traffic forecasting with temporal and spatial attention.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod synthetic;
pub mod training;

pub use error::{CoreError, ErrorClass, Result};
