pub mod bootstrap;
pub mod curve;
pub mod data_io;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod parallel;
pub mod prediction;
pub mod quadrature;
pub mod smsn;
pub mod special;
pub mod synthetic;

pub use error::{Error, Result};
