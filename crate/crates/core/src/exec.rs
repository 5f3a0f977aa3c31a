//! Execution helpers for the data-parallel inner loops.
//!
//! All batch-shaped work in this crate (per-sample gradients, embedding,
//! pair synthesis, metric sweeps) goes through [`map_ordered`], which
//! fans out with rayon when the `parallel` feature is enabled and falls
//! back to a plain iterator otherwise. Outputs always come back in input
//! order and callers reduce them sequentially, so a run produces
//! bit-identical numbers regardless of feature flags or thread count.
//! [`map_ordered_seq`] is always compiled; benches use it to compare the
//! two paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential twin of [`map_ordered`], available under either feature set.
pub fn map_ordered_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Map over an index range `0..n`, preserving order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_output_matches_sequential() {
        let items: Vec<u64> = (0..257).collect();
        let par = map_ordered(&items, |x| x * 3 + 1);
        let seq = map_ordered_seq(&items, |x| x * 3 + 1);
        assert_eq!(par, seq);
    }

    #[test]
    fn index_map_preserves_order() {
        let out = map_indices(100, |i| i as f64 * 0.5);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i as f64 * 0.5);
        }
    }
}
