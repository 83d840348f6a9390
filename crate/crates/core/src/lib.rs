pub mod augment;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pyramid;
pub mod resample;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// The random stream used everywhere; seedable and position-addressable so
/// training can be resumed bit-exactly.
pub type Rng = rand_chacha::ChaCha8Rng;
