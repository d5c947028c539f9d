pub mod baselines;
pub mod bench;
pub mod denoiser;
pub mod error;
pub mod maze;
pub mod sampler;
pub mod trajectory;
pub mod tree;

pub use error::{Error, Result};
