//! Fan-out helpers for independent runs (instance batches, sweeps).
//!
//! A single integration is strictly sequential; whole runs share no mutable
//! state, so batches map cleanly across workers. With the `parallel` feature
//! (default) the work is distributed via rayon; without it the same call
//! degrades to a plain sequential map, preserving output order either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(&f).collect()
    }
}

/// Sequential reference map with the same signature, kept for benchmark
/// comparisons against the parallel path.
pub fn map_sequential<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let out = map(&items, |&x| x * x);
        let reference = map_sequential(&items, |&x| x * x);
        assert_eq!(out, reference);
    }
}
