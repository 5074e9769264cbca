//! Sequential / rayon execution of row-chunked reductions.
//!
//! Both paths split the rows into the same fixed-size chunks and return the per-chunk
//! results in chunk order, so any fold over them is bitwise identical whichever path ran.

use std::ops::Range;

/// Rows per chunk in every chunked reduction.
pub const ROW_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

fn chunk_range(i: usize, n: usize) -> Range<usize> {
    let start = i * ROW_CHUNK;
    start..(start + ROW_CHUNK).min(n)
}

/// Applies `f` to each `ROW_CHUNK`-sized range of `0..n`, results in range order.
pub fn map_chunks<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let chunks = n.div_ceil(ROW_CHUNK);
    match exec {
        Execution::Sequential => (0..chunks).map(|i| f(chunk_range(i, n))).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..chunks)
                .into_par_iter()
                .map(|i| f(chunk_range(i, n)))
                .collect()
        }
    }
}
