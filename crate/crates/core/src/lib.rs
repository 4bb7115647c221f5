pub mod data;
pub mod delta;
pub mod error;
pub mod modulator;
pub mod net;
pub mod norm;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{KmError, Result};
