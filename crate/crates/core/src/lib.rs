pub mod compile;
pub mod error;
pub mod fusion;
pub mod fuzzy;
pub mod harness;
pub mod lower;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod tables;

pub use error::{Error, Result};
