pub mod apple;
pub mod data;
pub mod evaluation;
pub mod experiment;
mod error;
pub mod imageio;
pub mod metrics;
pub mod reporting;
pub mod segmentor;
pub mod synth;
pub mod training;

pub use error::{FairsegError, Result};
