pub mod cli;
pub mod codec;
pub mod error;
pub mod harness;
pub mod init;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod residual;
pub mod tensor_store;

pub use error::{Error, Result};
