//! Fixed-size rayon pools shared by every stage.
//!
//! Stages are configured with explicit thread counts, so pools are cached
//! per count instead of using the global pool.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::{ThreadPool, ThreadPoolBuilder};

fn registry() -> &'static Mutex<HashMap<usize, Arc<ThreadPool>>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    POOLS.get_or_init(|| Mutex::new(HashMap::new()))
}

pub fn pool(threads: usize) -> Arc<ThreadPool> {
    let threads = threads.max(1);
    let mut pools = registry().lock().unwrap_or_else(|e| e.into_inner());
    pools
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(move |i| format!("roibin-{threads}-{i}"))
                    .build()
                    .expect("failed to spawn worker threads"),
            )
        })
        .clone()
}

/// Runs `f` on a pool of `threads` workers, or inline when `threads <= 1`.
pub fn run<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads <= 1 {
        f()
    } else {
        pool(threads).install(f)
    }
}

/// Number of hardware threads available to this process.
pub fn available_cores() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
