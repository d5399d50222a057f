//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel path in the crate goes through [`map_indexed`], which
//! produces per-index results in index order. Callers reduce those results
//! sequentially, so the parallel and sequential paths are bit-identical.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fills `out` in chunks of `chunk` elements, one call of `f` per chunk.
pub fn for_each_chunk<F>(exec: Exec, out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && out.len() > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let seq = map_indexed(Exec::Sequential, 100, |i| (i as f64).sqrt());
        let par = map_indexed(Exec::Parallel, 100, |i| (i as f64).sqrt());
        assert_eq!(seq, par);

        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        for_each_chunk(Exec::Sequential, &mut a, 8, |i, c| c.fill(i as f64));
        for_each_chunk(Exec::Parallel, &mut b, 8, |i, c| c.fill(i as f64));
        assert_eq!(a, b);
        assert_eq!(a[63], 7.0);
    }
}
