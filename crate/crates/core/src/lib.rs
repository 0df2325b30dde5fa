pub mod cli;
pub mod datamodel;
pub mod encoder;
pub mod explainer;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod retriever;
pub mod tokenizer;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
