pub mod error;
pub mod linalg;
pub mod rng;
pub mod heads;
pub mod sopool;
pub mod prompts;
pub mod dataset;
pub mod trainer;
pub mod storage;
pub mod gradcheck;

pub use error::{Error, Result};
