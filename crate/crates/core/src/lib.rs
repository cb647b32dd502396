pub mod calculus;
pub mod chaos;
pub mod error;
pub mod harness;
pub mod measures;
pub mod model;
pub mod policy;
pub mod simulate;
pub mod snell;

pub use error::{Error, Result};
