//! Execution policy: data-parallel particle sweeps with a sequential fallback.
//!
//! The heavy loops in this crate are embarrassingly parallel maps over
//! particles, seeds, or sweep points. They are funneled through the helpers
//! here so that
//!
//! - the `parallel` feature (rayon) and the sequential fallback share one call
//!   site, and
//! - **reductions are always performed in index order**: helpers return
//!   index-ordered buffers and callers fold them sequentially. Floating-point
//!   addition is not associative, so an unordered parallel reduction would
//!   make results depend on scheduling. With ordered reduction, outputs are
//!   bit-identical for any worker count.
//!
//! The worker count is a process-global policy set once per run (CLI flag
//! `--workers`); `with_workers` installs a dedicated rayon pool of that size.

use std::sync::RwLock;

/// Process-global worker policy.
///
/// `None` means "library default": rayon's global pool when the `parallel`
/// feature is on, sequential otherwise.
static WORKER_POLICY: RwLock<Option<usize>> = RwLock::new(None);

#[cfg(feature = "parallel")]
static POOL: RwLock<Option<std::sync::Arc<rayon::ThreadPool>>> = RwLock::new(None);

/// Install a fixed worker count for subsequent parallel maps.
///
/// `workers = 1` forces sequential execution even in parallel builds. Without
/// the `parallel` feature the call records the request but execution is always
/// sequential. Calling again replaces the previous policy.
pub fn set_workers(workers: usize) {
    *WORKER_POLICY.write().expect("worker policy lock") = Some(workers.max(1));
    #[cfg(feature = "parallel")]
    {
        let pool = if workers > 1 {
            Some(std::sync::Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("rayon pool construction"),
            ))
        } else {
            None
        };
        *POOL.write().expect("pool lock") = pool;
    }
}

/// Current worker policy: `None` = library default.
pub fn workers() -> Option<usize> {
    *WORKER_POLICY.read().expect("worker policy lock")
}

/// Whether calls will actually fan out across threads.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        workers() != Some(1)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Map `f` over `0..n`, returning results in index order.
///
/// The only entry point for fan-out. Results are collected into an
/// index-ordered `Vec`; any reduction the caller performs over that `Vec` is
/// therefore schedule-independent.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            let guard = POOL.read().expect("pool lock");
            return match guard.as_ref() {
                Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                None => (0..n).into_par_iter().map(&f).collect(),
            };
        }
    }
    (0..n).map(f).collect()
}

/// Apply `f` to every element of `items` in place, fanning out when parallel.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            let guard = POOL.read().expect("pool lock");
            let mut run = || {
                items
                    .par_iter_mut()
                    .enumerate()
                    .for_each(|(i, item)| f(i, item))
            };
            match guard.as_ref() {
                Some(pool) => pool.install(run),
                None => run(),
            }
            return;
        }
    }
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}

/// Sequential, index-ordered sum of a buffer produced by [`map_indexed`].
///
/// Kept as a named function so call sites document that the reduction order
/// is deliberate.
pub fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().sum()
}
