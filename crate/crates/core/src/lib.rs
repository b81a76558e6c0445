pub mod attention;
pub mod backbone;
pub mod config;
pub mod correlation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradsuite;
pub mod head;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
