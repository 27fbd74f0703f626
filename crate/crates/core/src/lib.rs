pub mod attention;
pub mod autodiff;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;

pub use error::{Error, Result};
