//! Rayon-backed executor.

use rayon::prelude::*;
use xlris_core::exec::Executor;

/// Thread count override read by [`Parallel::from_env`].
pub const THREADS_VAR: &str = "XLRIS_THREADS";

/// Order-preserving parallel map on a dedicated pool.
pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    pub fn new(threads: usize) -> anyhow::Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        Ok(Self { pool })
    }

    /// `XLRIS_THREADS` threads, or rayon's default when unset.
    pub fn from_env() -> anyhow::Result<Self> {
        let threads = match std::env::var(THREADS_VAR) {
            Ok(v) => v
                .parse::<usize>()
                .map_err(|_| anyhow::anyhow!("{THREADS_VAR} must be a positive integer, got {v:?}"))?,
            Err(_) => 0,
        };
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Parallel {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }
}
