//! Worker pool sizing. `PIAVE_THREADS` caps the number of workers; results
//! are always gathered in input order, so output never depends on it.

use rayon::ThreadPool;

pub const THREADS_ENV: &str = "PIAVE_THREADS";

pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(available),
        _ => available,
    }
}

pub fn pool() -> ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .expect("thread pool")
}
