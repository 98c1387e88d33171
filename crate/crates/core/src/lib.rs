//! Report-guided global-local contrastive training and dual-query
//! multi-label inference on paired image/report data.

pub mod augment;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod prompt;
pub mod synthetic;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
