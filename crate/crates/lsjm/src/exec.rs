//! Rayon-backed finite-difference probe execution.

use lsjm_core::optimizer::ProbeExecutor;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

/// Evaluates probes on a dedicated thread pool. Results keep probe order, so
/// the fit does not depend on the number of threads.
pub struct Parallel {
    pool: ThreadPool,
}

impl Parallel {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
        Ok(Parallel { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Runs `op` inside the pool, so nested parallel iterators share its workers.
    pub fn install<R: Send>(&self, op: impl FnOnce() -> R + Send) -> R {
        self.pool.install(op)
    }
}

impl ProbeExecutor for Parallel {
    fn evaluate(&self, points: &[Vec<f64>], f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Vec<f64> {
        self.pool.install(|| points.par_iter().map(|p| f(p)).collect())
    }
}
