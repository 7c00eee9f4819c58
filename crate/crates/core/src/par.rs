//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! `ExecMode::Sequential` or a build without the feature runs the same closures
//! in order. Results never depend on the mode: every helper writes into
//! disjoint slots and reductions are done afterwards in index order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// Parallel only when the feature is compiled in.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(mode: ExecMode, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk > 0);
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
        _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// Like [`for_each_chunk_mut`], collecting one result per chunk in order.
pub fn map_chunks_mut<T, R, F>(mode: ExecMode, data: &mut [T], chunk: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Send + Sync,
{
    assert!(chunk > 0);
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
        }
        _ => data.chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
    }
}

/// `(0..n).map(f).collect()`, in index order.
pub fn map_indices<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Configure the global pool size once; later calls are ignored.
pub fn init_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        assert_eq!(map_indices(ExecMode::Parallel, 1000, f), map_indices(ExecMode::Sequential, 1000, f));

        let mut a = vec![0usize; 103];
        let mut b = a.clone();
        for_each_chunk_mut(ExecMode::Parallel, &mut a, 10, |i, c| c.iter_mut().for_each(|v| *v = i));
        for_each_chunk_mut(ExecMode::Sequential, &mut b, 10, |i, c| c.iter_mut().for_each(|v| *v = i));
        assert_eq!(a, b);
        assert_eq!(a[102], 10);
    }
}
