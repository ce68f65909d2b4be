//! Monte Carlo execution: path-parallel map plus reduction-order control.
//!
//! Per-path work is a pure function of (master seed, path index), so the map
//! phase is deterministic for any thread count. Floating-point reductions are
//! order-sensitive; `Reduction::FixedOrder` (the default) folds the collected
//! per-path values in index order and is therefore bit-reproducible across
//! thread counts, while `Reduction::Parallel` lets rayon reduce in whatever
//! order the scheduler produces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    FixedOrder,
    Parallel,
}

/// Execution context shared by every estimator and experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecCtx {
    /// Worker threads; 0 means the rayon default.
    pub threads: usize,
    pub reduction: Reduction,
}

impl Default for ExecCtx {
    fn default() -> Self {
        ExecCtx { threads: 0, reduction: Reduction::FixedOrder }
    }
}

impl ExecCtx {
    pub fn fixed(threads: usize) -> Self {
        ExecCtx { threads, reduction: Reduction::FixedOrder }
    }

    /// Run `f` inside a pool of the configured size.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        if self.threads == 0 {
            f()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .expect("thread pool construction");
            pool.install(f)
        }
    }

    /// Evaluate `f(0..m)` in parallel, returning results in index order.
    pub fn run_paths<T, F>(&self, m: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.install(|| (0..m).into_par_iter().map(f).collect())
    }

    /// Sum respecting the configured reduction order.
    pub fn reduce_sum(&self, xs: &[f64]) -> f64 {
        match self.reduction {
            Reduction::FixedOrder => xs.iter().sum(),
            Reduction::Parallel => xs.par_iter().sum(),
        }
    }
}

/// Outcome of one simulated path: a value or a divergence marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathOutcome<T> {
    Ok(T),
    Diverged,
}

impl<T> PathOutcome<T> {
    pub fn ok(self) -> Option<T> {
        match self {
            PathOutcome::Ok(v) => Some(v),
            PathOutcome::Diverged => None,
        }
    }
}

/// Split outcomes into finite values and a divergence count.
pub fn collect_finite<T>(outcomes: Vec<PathOutcome<T>>) -> (Vec<T>, usize) {
    let mut vals = Vec::with_capacity(outcomes.len());
    let mut diverged = 0;
    for o in outcomes {
        match o {
            PathOutcome::Ok(v) => vals.push(v),
            PathOutcome::Diverged => diverged += 1,
        }
    }
    (vals, diverged)
}
