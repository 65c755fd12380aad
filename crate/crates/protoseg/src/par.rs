//! Data-parallel map over independent work items (episodes, dataset files).
//!
//! With the default `parallel` feature the map runs on the rayon pool; the
//! sequential fallback keeps identical output ordering, so results are
//! bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over indexed items, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn parallel_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn parallel_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Sequential map with the same shape as [`parallel_map`]; used by the
/// benchmark suite to compare both execution paths.
pub fn sequential_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
