pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod negsample;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod textgraph;
pub mod training;

pub use error::{Error, Result};
