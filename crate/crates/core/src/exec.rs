//! Sequential / parallel execution switch.
//!
//! Every hot loop in the crate is written against these helpers so the same
//! code runs on rayon (feature `parallel`, on by default) or on a plain
//! iterator. Results are always returned in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a data-parallel kernel should execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    /// Uses rayon when compiled with `parallel`; sequential otherwise.
    #[default]
    Parallel,
}

impl ExecMode {
    /// True if this mode will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Block size for [`sum`]. Fixed so the summation tree never depends on the
/// number of worker threads.
const SUM_BLOCK: usize = 256;

/// Sums `f(item)` over `items` with a fixed blocked order: each block of
/// [`SUM_BLOCK`] items is summed left to right, then block sums are added left
/// to right. Parallel and sequential execution give bit-identical results.
pub fn sum<T, F>(mode: ExecMode, items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync + Send,
{
    let blocks: Vec<&[T]> = items.chunks(SUM_BLOCK).collect();
    let partial = map(mode, &blocks, |block| block.iter().map(&f).sum::<f64>());
    partial.into_iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        let a = sum(ExecMode::Sequential, &xs, |x| *x);
        let b = sum(ExecMode::Parallel, &xs, |x| *x);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(
            map(ExecMode::Sequential, &xs, |x| x * 2.0),
            map(ExecMode::Parallel, &xs, |x| x * 2.0)
        );
    }

    #[test]
    fn map_range_keeps_order() {
        assert_eq!(map_range(ExecMode::Parallel, 5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
