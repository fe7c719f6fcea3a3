pub mod bridge;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod mask;
pub mod policy;
pub mod protocol;
pub mod scene;
pub mod segmenter;

pub use error::{Error, Result};
