//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool
//! sized by the caller's worker budget. Without it, or with a budget of one
//! worker, everything runs on the calling thread. Output order always
//! matches input order, so results are identical either way.

/// Number of logical processors, used as the default worker budget.
pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Maps `f` over `items` using up to `workers` threads, preserving order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;

    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    if workers == rayon::current_num_threads() {
        return items.par_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(err) => {
            log::warn!("falling back to sequential execution: {err}");
            items.iter().map(f).collect()
        }
    }
}

/// Sequential fallback: the worker budget is ignored.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], _workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Splits `total` into `chunk`-sized pieces as `(start, len)` pairs.
pub fn chunk_ranges(total: usize, chunk: usize) -> Vec<(usize, usize)> {
    let chunk = chunk.max(1);
    (0..total)
        .step_by(chunk)
        .map(|start| (start, chunk.min(total - start)))
        .collect()
}
