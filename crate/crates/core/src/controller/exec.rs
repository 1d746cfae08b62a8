//! Index-ordered map over rollouts, parallel when the `parallel` feature is
//! enabled and more than one worker is requested.

#[cfg(feature = "parallel")]
use std::sync::Arc;

use crate::Result;

#[derive(Clone)]
pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}

impl Executor {
    /// `workers == 0` uses every available core; `1` runs inline.
    #[cfg(feature = "parallel")]
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("rollout-{i}"))
            .build()
            .map_err(|e| crate::Error::config("controller.workers", e.to_string()))?;
        Ok(Self {
            workers: pool.current_num_threads(),
            pool: Some(Arc::new(pool)),
        })
    }

    #[cfg(not(feature = "parallel"))]
    pub fn new(workers: usize) -> Result<Self> {
        if workers > 1 {
            log::debug!("built without the parallel feature; ignoring workers = {workers}");
        }
        Ok(Self::sequential())
    }

    pub fn sequential() -> Self {
        Self {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Effective number of worker threads.
    pub fn workers(&self) -> usize {
        self.workers
    }

    /// `(0..n).map(f)` collected in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}
