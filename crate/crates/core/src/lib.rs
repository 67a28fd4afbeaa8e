pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod label_pool;
pub mod metrics;
pub mod objective;
pub mod replay;
pub mod report;
pub mod seq2seq;
pub mod tensor;

pub use error::{Error, Result};
