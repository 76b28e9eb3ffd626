pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod heads;
pub mod hema_former;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod testing;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{ModelError, Result};
