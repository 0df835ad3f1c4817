pub mod cli;
pub mod decode;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod model;
pub mod parallel;
pub mod pseudo;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
