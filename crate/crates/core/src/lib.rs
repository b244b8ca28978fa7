//! Equivariant convolution on the cyclic rotation group `C_n`, plus a relaxed
//! variant that perturbs each rotated filter copy with a learnable bias grid.
//!
//! The crate is self-contained: dense tensors, a seeded RNG, 2D correlation,
//! filter-bank construction, differentiable layers with hand-written backward
//! passes, and diagnostics that measure how far a layer deviates from exact
//! equivariance.
//!
//! Conventions used throughout:
//!
//! * tensors are row-major `f64` with explicit shapes,
//! * feature maps on the group carry an explicit group axis: `[C, n, h, w]`
//!   per sample, `[B, C, n, h, w]` batched,
//! * filter banks are `[C_out, n, C_in, k, k]` (lift) or
//!   `[C_out, n, C_in, n, k, k]` (group), with the output-group axis second,
//! * positive rotations are counterclockwise; rotations that are exact
//!   multiples of 90 degrees go through an integer permutation so that
//!   equivariance identities hold to machine precision.

pub mod conv;
pub mod error;
pub mod exec;
pub mod filters;
pub mod grad;
pub mod group;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use group::CyclicGroup;
pub use rng::Rng;
pub use tensor::Tensor;
