//! Data-parallel map over independent samples.
//!
//! With the `parallel` feature (default) work is distributed via rayon;
//! without it the same API runs sequentially. Results come back in input
//! order either way, and all randomness is counter-based, so the feature
//! flag and the thread count never change computed values.

/// Configure the global thread pool from `MURTREE_THREADS`, if set.
/// Returns the applied cap. Safe to call more than once; only the first
/// call can take effect.
pub fn configure_threads_from_env() -> Option<usize> {
    let n: usize = std::env::var("MURTREE_THREADS").ok()?.parse().ok()?;
    if n == 0 {
        return None;
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Some(n)
}

#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Index-driven variant of [`par_map`].
#[cfg(feature = "parallel")]
pub fn par_map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}
