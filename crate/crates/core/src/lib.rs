pub mod analysis;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod models;
pub mod runtime;

pub use error::{Error, Result};
