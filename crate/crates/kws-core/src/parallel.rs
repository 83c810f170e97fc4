//! Data-parallel map over independent work items.
//!
//! Per-clip gradient and scoring work is embarrassingly parallel; with the
//! `parallel` feature (default) it fans out over rayon, otherwise it runs
//! sequentially. Results come back in input order either way, and callers
//! reduce them sequentially, so numeric output is identical with the
//! feature on or off.

#[cfg(feature = "parallel")]
pub fn map_items<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_items<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Always-sequential twin of [`map_items`], kept available so benchmarks can
/// measure the parallel speedup against the same code path.
pub fn map_items_seq<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}
