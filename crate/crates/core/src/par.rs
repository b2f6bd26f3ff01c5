//! Execution policy for the data-parallel inner loops.
//!
//! Every parallel kernel computes each output element independently with a
//! fixed summation order, so `Exec::Sequential` and `Exec::Parallel` produce
//! bitwise-identical results. Without the `parallel` feature the parallel
//! policy runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether inner loops may be spread over the current rayon pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

impl Exec {
    /// Policy for a worker count read from configuration: 0 means sequential.
    pub fn from_threads(threads: usize) -> Self {
        if threads == 0 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `(0..n).map(f).collect()`, possibly in parallel.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f(chunk_index, chunk)` over consecutive `chunk_len`-sized chunks.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Runs `f` inside a rayon pool with `threads` workers when `threads > 0`.
pub fn with_thread_cap<R: Send>(threads: usize, f: impl FnOnce(Exec) -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(|| f(Exec::Parallel));
        }
    }
    f(Exec::from_threads(threads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matches_sequential() {
        let seq = Exec::Sequential.map(1000, |i| (i as f64).sqrt());
        let par = Exec::Parallel.map(1000, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
    }

    #[test]
    fn chunks_visit_everything() {
        let mut v = vec![0usize; 10];
        Exec::Parallel.for_each_chunk_mut(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }

    #[test]
    fn zero_threads_is_sequential() {
        assert_eq!(Exec::from_threads(0), Exec::Sequential);
        with_thread_cap(0, |e| assert_eq!(e, Exec::Sequential));
    }
}
