//! Data-parallel helpers with a sequential fallback.

use crate::error::Result;

/// How independent work items are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Execution {
    /// Rayon thread pool; sequential when the `parallel` feature is off.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// True when work will actually run on the thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..len).map(f)` collected in index order.
pub fn map<T: Send>(exec: Execution, len: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Fallible [`map`]; the first error in index order is returned.
pub fn try_map<T: Send>(
    exec: Execution,
    len: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    map(exec, len, f).into_iter().collect()
}
