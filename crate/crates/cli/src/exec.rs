//! Per-sample executors: sequential, or a fixed-size rayon pool.

use rayon::prelude::*;
use smsa_core::optim::{SampleMap, Sequential};

use crate::error::{CliError, CliResult};

/// Environment variable that forces sequential execution when set to `1`.
pub const DETERMINISTIC_ENV: &str = "SPD_DETERMINISTIC";

pub enum Executor {
    Sequential,
    Pool(rayon::ThreadPool),
}

impl Executor {
    /// `workers = 0` or `SPD_DETERMINISTIC=1` selects sequential execution.
    pub fn new(workers: usize) -> CliResult<Self> {
        let forced = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1");
        if workers == 0 || forced {
            return Ok(Executor::Sequential);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map(Executor::Pool)
            .map_err(|e| CliError::config("workers", e.to_string()))
    }

    pub fn is_sequential(&self) -> bool {
        matches!(self, Executor::Sequential)
    }
}

impl SampleMap for Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Executor::Sequential => Sequential.map(n, f),
            Executor::Pool(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}
