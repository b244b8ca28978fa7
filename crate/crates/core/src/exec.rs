//! Execution policy for batch loops.
//!
//! Parallelism is only ever over the batch axis, and reductions always fold
//! per-sample results in index order, so `Serial` and `Parallel` produce
//! bit-identical numbers. `Serial` is the reference path.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Serial,
    Parallel,
}

impl Exec {
    pub fn from_threads(threads: usize) -> Exec {
        if threads <= 1 {
            Exec::Serial
        } else {
            Exec::Parallel
        }
    }
}

/// Maps `f` over `0..count`, preserving index order in the result.
pub fn map_indexed<R: Send>(
    exec: Exec,
    count: usize,
    f: impl Fn(usize) -> R + Sync + Send,
) -> Vec<R> {
    match exec {
        Exec::Serial => (0..count).map(f).collect(),
        Exec::Parallel => (0..count).into_par_iter().map(f).collect(),
    }
}
