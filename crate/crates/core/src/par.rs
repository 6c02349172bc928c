//! Data-parallel dispatch.
//!
//! Every hot loop in the crate (matrix kernels, pairwise distances,
//! per-query metrics, gradient checks) goes through this module. With the
//! `parallel` feature the work is split with rayon; without it the same
//! closures run sequentially. Each output element is produced by exactly
//! one closure invocation and reductions happen afterwards in index order,
//! so both paths give bit-identical results.

/// Which execution path a kernel should take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Below this many scalar operations the parallel path is not worth the
/// scheduling overhead.
pub const PARALLEL_THRESHOLD: usize = 1 << 15;

impl Execution {
    /// Picks the default execution for a job of `work` scalar operations.
    pub fn for_work(work: usize) -> Self {
        if work < PARALLEL_THRESHOLD {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

/// Calls `f(row_index, row)` for every `width`-sized row of `out`.
pub fn for_each_row<F>(exec: Execution, out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        }
        _ => out
            .chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let mut a = vec![0.0; 12];
        let mut b = vec![0.0; 12];
        let fill = |i: usize, row: &mut [f64]| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (i * 10 + j) as f64;
            }
        };
        for_each_row(Execution::Sequential, &mut a, 4, fill);
        for_each_row(Execution::Parallel, &mut b, 4, fill);
        assert_eq!(a, b);
        assert_eq!(
            map_range(Execution::Sequential, 5, |i| i * i),
            map_range(Execution::Parallel, 5, |i| i * i)
        );
    }

    #[test]
    fn small_work_stays_sequential() {
        assert_eq!(Execution::for_work(10), Execution::Sequential);
    }
}
