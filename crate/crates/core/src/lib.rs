pub mod codec;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod learners;
pub mod math;
pub mod meta;
pub mod nuisance;
pub mod panel;
pub mod rng;

pub use error::{Error, Result};
