//! Data-parallel helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (default) these fan work out over the
//! rayon pool; without it they degrade to plain loops. Every helper preserves
//! output ordering, so results are identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum per-call work (rough flop count) before parallel dispatch pays off.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

/// Apply `f` to each row of a mutable flat buffer, `row_len` elements per row.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<T, F>(data: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if data.len().saturating_mul(work_per_row.max(1)) >= PAR_THRESHOLD && row_len > 0 {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in data.chunks_mut(row_len.max(1)).enumerate() {
            f(i, row);
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<T, F>(data: &mut [T], row_len: usize, _work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    for (i, row) in data.chunks_mut(row_len.max(1)).enumerate() {
        f(i, row);
    }
}

/// Ordered map over indices `0..n`.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Send + Sync,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Send + Sync,
{
    (0..n).map(f).collect()
}
