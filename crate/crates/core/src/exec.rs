//! Data-parallel execution helpers.
//!
//! Every batch operation in this crate (sample generation, trials, Monte
//! Carlo calibration) maps a pure function over an index range and collects
//! the results in index order. With the `parallel` feature (default) the map
//! fans out over rayon; without it the same code path degrades to a
//! sequential loop. Because each item derives its own RNG stream from
//! `(seed, index)`, parallel and sequential execution produce identical
//! output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    seq_map_indexed(n, f)
}

/// Always-sequential map; the benchmark suite compares this against
/// [`par_map_indexed`], and `--threads 1` style runs can force it.
pub fn seq_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Installs a rayon pool with `threads` workers for the duration of `f`.
/// `threads = 0` means "library default". Without the `parallel` feature the
/// thread count is ignored and `f` runs on the calling thread.
#[cfg(feature = "parallel")]
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("rayon pool construction cannot fail for a positive thread count");
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<T: Send>(_threads: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

/// Splitmix64-style mixer for deriving independent RNG seeds from a master
/// seed and an arbitrary list of stream tags. Stable across platforms.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x9e37_79b9_7f4a_7c15;
    for &tag in tags {
        state = state.wrapping_add(tag).wrapping_add(0x9e37_79b9_7f4a_7c15);
        state = splitmix(state);
    }
    splitmix(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
