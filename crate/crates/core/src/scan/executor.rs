use std::sync::Arc;

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

/// Runs independent tasks either on the calling thread or on a fixed pool.
/// Task `i`'s result always lands in slot `i`, so output order never depends
/// on scheduling.
#[derive(Clone, Debug, Default)]
pub enum Executor {
    #[default]
    Serial,
    Pooled(Arc<ThreadPool>),
}

impl Executor {
    /// A pool with `workers` threads; `workers <= 1` gives the serial executor.
    pub fn with_workers(workers: usize) -> Result<Executor> {
        if workers <= 1 {
            return Ok(Executor::Serial);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Argument(format!("cannot build thread pool: {e}")))?;
        Ok(Executor::Pooled(Arc::new(pool)))
    }

    pub fn workers(&self) -> usize {
        match self {
            Executor::Serial => 1,
            Executor::Pooled(pool) => pool.current_num_threads(),
        }
    }

    /// Evaluates `f(0..n)` and collects results in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        match self {
            Executor::Serial => (0..n).map(f).collect(),
            Executor::Pooled(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}
