use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{Error, Result};

/// Environment variable capping worker threads; `0` selects the
/// single-threaded reference mode.
pub const THREADS_ENV: &str = "STATECHANGE_THREADS";

/// Order-preserving map over independent work items.
///
/// Results always come back in input order, so reductions over them are
/// identical whatever the thread count.
#[derive(Debug)]
pub struct Workers {
    pool: Option<ThreadPool>,
}

impl Workers {
    pub fn single() -> Self {
        Workers { pool: None }
    }

    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Ok(Self::single());
        }
        let pool = ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Workers { pool: Some(pool) })
    }

    /// Read [`THREADS_ENV`]; unset means one worker per available core.
    pub fn from_env() -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => {
                let threads = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a nonnegative integer, got {v:?}")))?;
                Self::with_threads(threads)
            }
            Err(_) => {
                let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
                Self::with_threads(cores)
            }
        }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

impl Default for Workers {
    fn default() -> Self {
        Self::single()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let single = Workers::single().map(&items, |x| x * x);
        let pooled = Workers::with_threads(4).unwrap().map(&items, |x| x * x);
        assert_eq!(single, pooled);
        assert_eq!(Workers::with_threads(0).unwrap().threads(), 1);
    }
}
