pub mod cells;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod init;
pub mod model;
pub mod train;

pub use error::{KtError, Result};
