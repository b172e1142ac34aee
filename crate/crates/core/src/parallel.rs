//! Data-parallel map helpers with a sequential fallback.
//!
//! All per-sample work in this crate (dataset generation, baseline solves,
//! batch evaluation) goes through [`par_map_indexed`]. With the `parallel`
//! feature (default) the map runs on rayon; without it the sequential
//! fallback below is used. Work items are independent and results are
//! collected in index order, so both paths produce bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_serial(n, f)
}

/// Sequential reference path. Always available so benches can compare the
/// two implementations within one binary.
pub fn map_indexed_serial<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_serial_order() {
        let a = par_map_indexed(1000, |i| i * i);
        let b = map_indexed_serial(1000, |i| i * i);
        assert_eq!(a, b);
    }
}
