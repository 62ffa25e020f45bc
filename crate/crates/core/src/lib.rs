pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod hmc;
pub mod hmm;
pub mod matrix;
pub mod report;
pub mod rng;
pub mod synth;
pub mod vb;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
