pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradsuite;
pub mod models;
pub mod retriever;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
