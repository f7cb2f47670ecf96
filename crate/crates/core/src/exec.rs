//! Pluggable map executor.
//!
//! The core never spawns threads. Callers that want data parallelism hand in
//! an [`Executor`] whose `map` preserves input order, so reductions over the
//! results stay bit-identical regardless of thread count.

use alloc::vec::Vec;

pub trait Executor: Sync {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}
