//! Spatio-temporal traffic forecasting with learned fused graphs and
//! traffic-pattern decoupling.

pub mod config;
pub mod data;
pub mod decouple;
mod error;
pub mod graph;
pub mod model;
pub mod network;
pub mod run;
pub mod train;

pub use error::{Error, Result};
pub use model::{Forward, Sfadnet};
