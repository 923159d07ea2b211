pub mod cli;
pub mod composer;
pub mod container;
pub mod error;
pub mod gcns;
pub mod harness;
pub mod image;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
