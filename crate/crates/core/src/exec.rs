//! Replicate fan-out.
//!
//! Every Monte Carlo loop in the crate goes through [`Executor::map`], which
//! evaluates a closure for each replicate index and returns the results in
//! index order. Reductions happen afterwards, sequentially, so results do not
//! depend on the number of workers. With the `parallel` feature disabled the
//! parallel executor degrades to a plain loop.

use std::fmt;

/// Environment variable read by [`Executor::from_env`].
pub const THREADS_ENV: &str = "SPLINESEL_THREADS";

#[derive(Clone)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<std::sync::Arc<rayon::ThreadPool>>,
    threads: usize,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor")
            .field("threads", &self.threads)
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::from_env()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            #[cfg(feature = "parallel")]
            pool: None,
            threads: 1,
        }
    }

    /// A worker pool with `threads` workers; `0` means one per available core.
    pub fn parallel(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if threads > 0 {
                builder = builder.num_threads(threads);
            }
            match builder.build() {
                Ok(pool) => {
                    let threads = pool.current_num_threads();
                    Executor {
                        pool: Some(std::sync::Arc::new(pool)),
                        threads,
                    }
                }
                Err(e) => {
                    log::warn!("falling back to sequential execution: {e}");
                    Self::sequential()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Self::sequential()
        }
    }

    /// Reads `SPLINESEL_THREADS`: unset or `0` uses every core, `1` is
    /// sequential.
    pub fn from_env() -> Self {
        match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            Some(1) => Self::sequential(),
            Some(t) => Self::parallel(t),
            None => Self::parallel(0),
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
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

    /// Evaluates `f(0..len)` and returns the results in index order.
    pub fn map<T, F>(&self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..len).into_par_iter().map(&f).collect());
        }
        (0..len).map(f).collect()
    }
}
