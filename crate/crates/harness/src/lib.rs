//! Training harness for the equivariant convolution stack: a synthetic
//! rotated-glyph dataset with a controllable symmetry-breaking knob, an SGD
//! loop with the warmup/cosine schedule, evaluation, a built-in invariant
//! suite, and the `rre` command-line tool.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
