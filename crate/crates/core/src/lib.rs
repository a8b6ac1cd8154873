//! Sparse-coding based differentiable architecture search.
//!
//! The library recovers sparse architecture vectors from compressed
//! measurements with ISTA, trains a weight-sharing super-net whose node
//! mixing is driven by those measurements, and benchmarks the found
//! architectures against their stand-alone performance.

// negated comparisons are used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval_bench;
pub mod io;
pub mod linalg;
pub mod measurement;
pub mod search;
pub mod sparse_coding;
pub mod supernet;

pub use error::{Error, Result};
pub use linalg::Matrix;

/// Cap the worker threads used by parallel recovery and benchmark runs.
/// Must be called before any parallel work starts.
pub fn init_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidArgument("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}
