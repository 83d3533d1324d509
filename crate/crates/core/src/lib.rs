pub mod autograd;
pub mod behavior;
pub mod config;
pub mod container;
pub mod datastore;
pub mod envgrid;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod trainer;
pub mod worldmodel;

pub use error::{Error, Result};

/// Generator used for every seeded draw in the crate.
pub type Prng = rand_chacha::ChaCha8Rng;
