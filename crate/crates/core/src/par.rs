//! Thin switch between rayon and sequential execution.
//!
//! Every data-parallel loop in the crate funnels through [`maybe_par_map`].
//! Results come back in input order, so callers can reduce them sequentially
//! and produce bit-identical output for any worker count. Building without
//! the `parallel` feature removes the rayon dependency entirely.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled
/// and `parallel` is true, returning results indexed in input order.
pub fn maybe_par_map<R, F>(parallel: bool, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Runs `f` inside a rayon pool of `threads` workers (bounding nested
/// parallelism); falls back to calling `f` directly without the feature.
pub fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("rayon pool");
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}
