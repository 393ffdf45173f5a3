//! Graph parsing as sequence-to-sequence generation, with gold structure
//! leaked into the encoder through structural adapters at training time.

pub mod amr;
pub mod config;
pub mod corpus;
pub mod error;
pub mod grammar;
pub mod model;
pub mod smatch;
pub mod training;
pub mod vocab;
pub mod wag;

pub use error::{Error, Result};
pub use leak_nn as nn;
