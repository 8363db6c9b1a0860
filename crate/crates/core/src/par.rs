//! Data-parallel helpers.
//!
//! With the `parallel` feature these use rayon; without it they are plain
//! sequential loops with identical results. Callers that need a specific path
//! (benchmarks, equivalence tests) use [`Strategy`] explicitly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Sequential,
    /// Uses rayon when compiled with `parallel`, otherwise sequential.
    Parallel,
}

impl Default for Strategy {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Strategy::Parallel
        } else {
            Strategy::Sequential
        }
    }
}

/// Maximum of `f` over `items`, or `None` when `items` is empty.
///
/// `f` must never return NaN. `f64::max` is exact, so the result does not
/// depend on reduction order.
pub fn max_f64<T, F>(items: &[T], strategy: Strategy, f: F) -> Option<f64>
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync + Send,
{
    if items.is_empty() {
        return None;
    }
    match strategy {
        #[cfg(feature = "parallel")]
        Strategy::Parallel => items.par_iter().map(&f).reduce_with(f64::max),
        _ => items.iter().map(&f).reduce(f64::max),
    }
}

/// Order-preserving map.
pub fn map<T, U, F>(items: &[T], strategy: Strategy, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match strategy {
        #[cfg(feature = "parallel")]
        Strategy::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Order-preserving map on a pool of at most `workers` threads.
pub fn map_with_workers<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| items.par_iter().map(f).collect());
        }
    }
    let _ = workers;
    items.iter().map(f).collect()
}
