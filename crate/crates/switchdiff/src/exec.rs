//! Data-parallel driver helpers.
//!
//! Heavy loops (Monte Carlo batches, per-segment action evaluation,
//! boundary scans) run through [`map_indexed`], which uses rayon when the
//! `parallel` feature is enabled and a plain loop otherwise. Results are
//! always collected in index order, so output is bit-identical across
//! worker counts and between the two implementations. [`map_indexed_seq`]
//! is always available for benchmarks comparing the two paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential reference implementation, kept available under all feature
/// combinations so benchmarks and determinism tests can compare against it.
pub fn map_indexed_seq<T, F>(n: usize, mut f: F) -> Vec<T>
where
    F: FnMut(usize) -> T,
{
    (0..n).map(&mut f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let a = map_indexed(257, |i| (i as f64).sqrt() * 3.1);
        let b = map_indexed_seq(257, |i| (i as f64).sqrt() * 3.1);
        assert_eq!(a, b);
    }
}
