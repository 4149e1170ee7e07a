//! Data-parallel execution of independent experiment cells.
//!
//! With the `parallel` feature (default) [`par_map_indices`] fans out over
//! rayon; without it the same call runs sequentially. Results come back in
//! input order either way, and cells receive only their index, so output is
//! identical regardless of worker count.

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn par_map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept for benchmarking the two paths against
/// each other.
pub fn seq_map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let par = par_map_indices(64, |i| i * i);
        let seq = seq_map_indices(64, |i| i * i);
        assert_eq!(par, seq);
    }
}
