//! Batch-level data parallelism.
//!
//! With the `parallel` feature the per-sample work of a batch runs on the
//! rayon pool; without it every call falls back to a plain sequential loop.
//! Results always come back in input order so that reductions performed by
//! the caller are reproducible.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Whether work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        self == Execution::Parallel && cfg!(feature = "parallel")
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<I, O, F>(exec: Execution, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let _ = exec;
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Maps `f` over `items` and folds the results with `combine`.
///
/// With `ordered` (or sequential execution) the fold runs left to right in
/// input order, which makes floating-point reductions reproducible. Otherwise
/// the association order follows rayon's work splitting.
pub fn map_reduce<I, O, F, R>(
    exec: Execution,
    ordered: bool,
    items: &[I],
    f: F,
    combine: R,
) -> Option<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
    R: Fn(O, O) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && !ordered {
        use rayon::prelude::*;
        return items
            .par_iter()
            .enumerate()
            .map(|(i, x)| f(i, x))
            .reduce_with(&combine);
    }
    let _ = ordered;
    map_ordered(exec, items, f).into_iter().reduce(combine)
}
