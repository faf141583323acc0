pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
pub mod io;
pub mod rng;
pub mod model;
pub mod data;
pub mod synth;
pub mod augment;
pub mod curation;
pub mod metrics;
pub mod train;
pub mod finetune;
pub mod config;
