//! Order-preserving map helpers that run on rayon when the `parallel`
//! feature is enabled and fall back to plain iteration otherwise.
//!
//! Every reduction in the crate first materializes per-item results with
//! one of these helpers and then folds them sequentially in index order,
//! so results are bitwise identical regardless of feature flags or the
//! number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving input order.
pub fn par_map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving index order.
pub fn par_map_range<U: Send, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f` on disjoint mutable row bands of `data`, splitting every
/// `band_rows * row_len` elements. Band index is passed to `f`.
pub fn par_for_each_band<T: Send, F>(data: &mut [T], band_len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(band_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(band_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
    }
}

/// True when compiled with the rayon-backed parallel code paths.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
