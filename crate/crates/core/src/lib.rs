pub mod codec;
pub mod error;
pub mod entropy_coder;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
