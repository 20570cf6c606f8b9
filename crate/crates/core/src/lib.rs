pub mod error;
pub mod flowgraph;
pub mod gateway;
pub mod intervention;
pub mod matching;
pub mod stats;
pub mod steering;
pub mod tensors;
pub mod toymodel;
pub mod transbridge;

pub use error::{Error, Result};
