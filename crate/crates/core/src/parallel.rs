//! Optional data parallelism controlled by `IDSR_THREADS`.
//!
//! Unset or `0` runs everything on the calling thread. Results always come
//! back in input order, so output does not depend on the thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "IDSR_THREADS";

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Thread count requested through the environment, if any.
pub fn requested_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| match requested_threads() {
        0 | 1 => None,
        n => rayon::ThreadPoolBuilder::new().num_threads(n).build().ok(),
    })
    .as_ref()
}

/// Maps `f` over `items`, in parallel when a pool is configured.
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    match pool() {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}
