//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper partitions work into independent units whose results are
//! written to disjoint outputs (or collected in index order), so the
//! `parallel` feature never changes a single bit of any result.

/// Below this many multiply-adds per call the thread pool is not used.
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, total_work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if total_work >= MIN_PARALLEL_WORK && rayon::current_num_threads() > 1 {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = total_work;
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 && rayon::current_num_threads() > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// True when this build dispatches work to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
