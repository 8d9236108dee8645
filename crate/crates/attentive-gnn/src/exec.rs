//! Data-parallel map over independent work items.
//!
//! `map_collect` fans out across rayon when the `parallel` feature is
//! enabled and falls back to a plain iterator otherwise. Results come back
//! in input order either way, so reductions over them are deterministic.

#[cfg(feature = "parallel")]
pub(crate) fn map_collect<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_collect<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential twin of [`map_collect`], always compiled so callers can
/// expose both paths side by side.
pub(crate) fn map_collect_seq<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    F: Fn(&I) -> R,
{
    items.iter().map(f).collect()
}
