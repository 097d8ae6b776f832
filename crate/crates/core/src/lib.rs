pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod regularizer;
pub mod rewrite;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
