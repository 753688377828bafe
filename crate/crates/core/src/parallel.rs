//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in input order and every reduction in the crate
//! folds them left to right, so outputs do not depend on the schedule. With
//! the `parallel` feature disabled every request runs on the calling thread.

use serde::{Deserialize, Serialize};

/// How independent work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    /// Run on the ambient rayon pool.
    #[default]
    Pool,
    /// Run on a dedicated pool with this many workers.
    Workers(usize),
}

impl Parallelism {
    pub fn from_workers(n: usize) -> Self {
        match n {
            0 => Parallelism::Pool,
            1 => Parallelism::Sequential,
            n => Parallelism::Workers(n),
        }
    }

    pub fn is_sequential(&self) -> bool {
        !cfg!(feature = "parallel") || matches!(self, Parallelism::Sequential)
    }
}

/// `items.iter().map(f)` in input order, in parallel where enabled.
pub fn par_map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match par {
            Parallelism::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            Parallelism::Pool => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            Parallelism::Workers(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()),
                Err(_) => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = par;
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}
