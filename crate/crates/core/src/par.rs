//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run sequentially. Results always come back in input order, so any
//! reduction performed by the caller over the returned `Vec` is independent
//! of the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
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

/// Maps `f` over a slice, returning results in input order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
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

/// Same as [`map_range`] but always sequential. Used as the baseline in
/// benchmarks and where callers need a guaranteed single-threaded path.
pub fn map_range_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Runs `op` with at most `threads` workers. `0` means the library default.
///
/// Without the `parallel` feature this simply calls `op`.
pub fn with_threads<R, F>(threads: usize, op: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return op();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(op),
            Err(err) => {
                log::warn!("could not build a {threads}-thread pool ({err}); using the global pool");
                op()
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        op()
    }
}

/// True when the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let out = map_range(1000, |i| i * 2);
        assert!(out.iter().enumerate().all(|(i, &v)| v == 2 * i));
        let seq = map_range_seq(1000, |i| i * 2);
        assert_eq!(out, seq);
    }

    #[test]
    fn thread_cap_runs_op() {
        let s: usize = with_threads(1, || map_slice(&[1usize, 2, 3], |x| x + 1).iter().sum());
        assert_eq!(s, 9);
    }
}
