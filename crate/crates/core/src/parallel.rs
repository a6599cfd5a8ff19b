//! Shared worker pool sized by `ILQ_THREADS`.

use std::sync::OnceLock;

pub const THREADS_VAR: &str = "ILQ_THREADS";

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads())
            .build()
            .expect("thread pool")
    })
}

/// Worker count: `ILQ_THREADS` when set to a positive integer, otherwise the
/// number of logical cores.
pub fn threads() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    pool().install(f)
}
