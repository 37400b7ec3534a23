//! Data-parallel kernels with a sequential fallback.
//!
//! Every kernel partitions work into fixed-size chunks and combines partial
//! results in chunk order, so the floating-point result is identical whether
//! the `parallel` feature is enabled or not and independent of the thread
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by reductions and element-wise kernels.
pub const CHUNK: usize = 4096;

/// How a kernel distributes its work.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Strategy {
    /// Parallel when the `parallel` feature is compiled in.
    pub fn current() -> Self {
        #[cfg(feature = "parallel")]
        {
            Strategy::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Strategy::Sequential
        }
    }
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::current()
    }
}

/// Calls `f(offset, chunk)` on consecutive mutable chunks of `out`.
pub fn for_each_chunk_mut<T, F>(strategy: Strategy, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    match strategy {
        Strategy::Sequential => out
            .chunks_mut(chunk)
            .enumerate()
            .for_each(|(c, s)| f(c * chunk, s)),
        #[cfg(feature = "parallel")]
        Strategy::Parallel => out
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(c, s)| f(c * chunk, s)),
    }
}

/// Evaluates `f(i)` for `i in 0..n`, preserving order.
pub fn map_indexed<T, F>(strategy: Strategy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match strategy {
        Strategy::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Strategy::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// `map_indexed` on a dedicated pool of `workers` threads; with one worker
/// or without the `parallel` feature it runs on the calling thread.
pub fn map_pool<T, F>(workers: usize, n: usize, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| crate::Error::Parameter(format!("cannot start {workers} workers: {e}")))?;
        return Ok(pool.install(|| map_indexed(Strategy::Parallel, n, f)));
    }
    let _ = workers;
    Ok(map_indexed(Strategy::Sequential, n, f))
}

/// Fixed-chunk sum of `f(i)` over `0..n`; partial sums are added in chunk order.
pub fn sum_indexed<F>(strategy: Strategy, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partial = map_indexed(strategy, n_chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        (lo..hi).map(&f).sum::<f64>()
    });
    partial.into_iter().sum()
}

/// Calls `f(s, segment)` on the disjoint segments `data[bounds[s]..bounds[s + 1]]`.
pub fn for_each_segment_mut<T, F>(strategy: Strategy, data: &mut [T], bounds: &[usize], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let mut segments = Vec::with_capacity(bounds.len().saturating_sub(1));
    let mut rest = &mut data[bounds.first().copied().unwrap_or(0)..];
    for w in bounds.windows(2) {
        let (head, tail) = rest.split_at_mut(w[1] - w[0]);
        segments.push(head);
        rest = tail;
    }
    match strategy {
        Strategy::Sequential => segments
            .into_iter()
            .enumerate()
            .for_each(|(s, seg)| f(s, seg)),
        #[cfg(feature = "parallel")]
        Strategy::Parallel => segments
            .into_par_iter()
            .enumerate()
            .for_each(|(s, seg)| f(s, seg)),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_indexed(Strategy::current(), a.len(), |i| a[i] * b[i])
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for_each_chunk_mut(Strategy::current(), y, CHUNK, |off, ys| {
        for (k, yv) in ys.iter_mut().enumerate() {
            *yv += alpha * x[off + k];
        }
    });
}
