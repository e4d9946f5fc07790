pub mod ablate;
pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{BmgfError, Result};
