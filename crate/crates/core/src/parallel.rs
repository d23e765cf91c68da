//! Index-ordered parallel map on a private rayon pool.

use rayon::prelude::*;

/// Evaluate `f(0..n)` on `threads` workers (0 = rayon default) and return the
/// results in index order, independent of scheduling.
pub fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    match builder.build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running serially");
            (0..n).map(f).collect()
        }
    }
}

/// Split `0..n` into fixed-size chunks so that per-chunk partial results can be
/// merged in chunk order, giving worker-count independent sums.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}
