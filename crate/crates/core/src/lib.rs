//! Decoding strategies, value-guided search, and likelihood/utility
//! analysis over exactly computable language models.

pub mod analysis;
pub mod cli;
pub mod decoders;
pub mod error;
pub mod guided;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod types;
pub mod value;

pub use error::{Error, Result};
