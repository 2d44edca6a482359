//! Order-preserving data-parallel map over independent work items.
//!
//! With the `parallel` feature and more than one worker, items are spread
//! over a dedicated rayon pool. Results always come back in input order and
//! reductions are folded sequentially by the caller, so outputs are
//! bit-identical to the single-worker path.

#[derive(Debug)]
pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Default for Executor {
    fn default() -> Self {
        Executor::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `workers <= 1` gives the sequential reference mode. Without the
    /// `parallel` feature every executor is sequential.
    pub fn with_workers(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if workers > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .ok();
                if let Some(pool) = pool {
                    return Executor {
                        workers,
                        pool: Some(pool),
                    };
                }
                log::warn!("could not build a {workers}-thread pool, running sequentially");
            }
        }
        let _ = workers;
        Executor::sequential()
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    pub fn map_indexed<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = Executor::sequential().map(&items, |x| x * x);
        let par = Executor::with_workers(4).map(&items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(Executor::with_workers(3).map_indexed(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn float_reductions_match_when_folded_in_order() {
        let items: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.37).sin()).collect();
        let fold = |v: Vec<f64>| v.into_iter().fold(0.0, |a, b| a + b);
        let a = fold(Executor::sequential().map(&items, |x| x.exp()));
        let b = fold(Executor::with_workers(4).map(&items, |x| x.exp()));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
