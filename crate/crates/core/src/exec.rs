//! Data-parallel helpers.
//!
//! Every Monte Carlo loop in the crate goes through [`map_indexed`], which
//! fans out over rayon when the `parallel` feature is enabled and the
//! process-wide [`Execution`] mode allows it. Results are always collected
//! in index order, so downstream reductions see the same sequence no matter
//! how the work was scheduled.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Parallel,
    Sequential,
}

static MODE: AtomicU8 = AtomicU8::new(0);

/// Selects how [`map_indexed`] schedules work for the whole process.
pub fn set_execution(mode: Execution) {
    let v = match mode {
        Execution::Parallel => 0,
        Execution::Sequential => 1,
    };
    MODE.store(v, Ordering::Relaxed);
}

pub fn execution() -> Execution {
    if !cfg!(feature = "parallel") {
        return Execution::Sequential;
    }
    match MODE.load(Ordering::Relaxed) {
        0 => Execution::Parallel,
        _ => Execution::Sequential,
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_indexed`] but short-circuits on the first error (lowest index wins).
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Applies `f` to consecutive `chunk`-sized pieces of `data`, in parallel when allowed.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => data
            .chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}
