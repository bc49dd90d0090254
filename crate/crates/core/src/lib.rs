pub mod autodiff;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod meta;
pub mod model;
pub mod tasks;

pub use error::{Error, Result};
