//! CTTS: a 1-D convolutional tokenizer feeding a transformer encoder that
//! classifies the sign of the next price change (up, down, flat), plus the
//! statistical and recurrent baselines it is compared against and the
//! sign-accuracy evaluation protocol.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
