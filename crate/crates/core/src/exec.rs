//! Ordered parallel execution of independent tasks.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs independent tasks on a fixed number of worker threads. Results are
/// returned in task order, so output depends only on the tasks themselves.
pub struct Executor {
    workers: usize,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Argument("worker count must be >= 1".into()));
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { workers, pool })
    }

    pub fn sequential() -> Self {
        Self { workers: 1, pool: None }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Applies `f(index, task)` to every task.
    pub fn map<T, R, F>(&self, tasks: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, T) -> R + Sync + Send,
    {
        match &self.pool {
            None => tasks.into_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            Some(pool) => pool.install(|| tasks.into_par_iter().enumerate().map(|(i, t)| f(i, t)).collect()),
        }
    }
}

/// One-shot [`Executor::map`].
pub fn parallel_map<T, R, F>(tasks: Vec<T>, workers: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync + Send,
{
    Ok(Executor::new(workers)?.map(tasks, f))
}
