//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions are split into fixed-size chunks whose partial results are
//! combined in chunk order, so the floating-point result does not depend on
//! the number of worker threads or on whether rayon is enabled at all.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per reduction chunk.
pub(crate) const CHUNK_ROWS: usize = 4096;

/// Map every element, preserving order.
pub(crate) fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
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

/// Map `n` indices, preserving order.
pub(crate) fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
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

/// Chunked reduction over `0..n`: `chunk(start, end)` produces a partial
/// result for a contiguous index range and `combine` folds partials left to
/// right in chunk order.
pub(crate) fn chunked_reduce<A, C, M>(n: usize, init: A, chunk: C, combine: M) -> A
where
    A: Send,
    C: Fn(usize, usize) -> A + Sync + Send,
    M: Fn(A, A) -> A,
{
    let n_chunks = n.div_ceil(CHUNK_ROWS);
    let partials = map_range(n_chunks, |c| {
        let start = c * CHUNK_ROWS;
        chunk(start, (start + CHUNK_ROWS).min(n))
    });
    partials.into_iter().fold(init, combine)
}
