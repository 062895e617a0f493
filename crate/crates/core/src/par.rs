//! Data-parallel helpers. With the `parallel` feature the loops run on the
//! rayon pool; without it they run sequentially. Every helper writes each
//! output slot from exactly one closure call, so results are bitwise
//! identical between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fill `out` in chunks of `chunk` elements; `f(chunk_index, chunk)`.
pub(crate) fn fill_chunks<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `0..n` to a vector, possibly in parallel.
pub(crate) fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Whether this build runs the helpers on a thread pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
