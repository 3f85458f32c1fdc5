pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod ree;
pub mod training;

pub use error::{Error, Result};
