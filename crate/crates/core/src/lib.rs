pub mod alignment;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
