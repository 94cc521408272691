//! Graph-convolutional collaborative filtering with targeted item-promotion
//! attacks that add user-item edges.

pub mod attack;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod seeds;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
