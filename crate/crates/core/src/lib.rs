pub mod analysis;
pub mod attack;
pub mod cli;
pub mod error;
pub mod synthdata;
pub mod taxonomy;
pub mod tensor;
pub mod tracing;
pub mod training;
pub mod util;
pub mod zoo;

pub use error::{Error, Result};
