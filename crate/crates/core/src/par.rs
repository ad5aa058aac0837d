//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper runs on the calling thread. Results never depend
//! on the choice: chunks are independent and reductions are over integers or
//! order-independent min/max.

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// Whether loops will actually fan out.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Runs `f(chunk_index, chunk)` over `chunk_len`-sized pieces of `out` and
/// folds the per-chunk results with `combine`.
pub(crate) fn chunks_mut_reduce<T, R, F, C>(
    out: &mut [T],
    chunk_len: usize,
    par: Parallelism,
    identity: R,
    f: F,
    combine: C,
) -> R
where
    T: Send,
    R: Send + Sync + Clone,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
    C: Fn(R, R) -> R + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return out
            .par_chunks_mut(chunk_len)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .reduce(|| identity.clone(), &combine);
    }
    let _ = par;
    out.chunks_mut(chunk_len)
        .enumerate()
        .fold(identity, |acc, (i, c)| combine(acc, f(i, c)))
}
