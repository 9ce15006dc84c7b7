//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan work out over rayon; without it, or
//! after [`set_sequential(true)`](set_sequential), they run the same chunks in
//! index order on the calling thread. Work is always split into the same fixed
//! chunks, so both paths produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "MFLOW_THREADS";

/// Force (or release) the sequential path at runtime. Benchmarks use this to
/// compare both paths inside one binary.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Worker cap read from `MFLOW_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Size the global worker pool. A no-op without the `parallel` feature; calling it
/// after the pool has started is reported as an error string.
pub fn init_threads(threads: Option<usize>) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| e.to_string())?;
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f)`, collected in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
