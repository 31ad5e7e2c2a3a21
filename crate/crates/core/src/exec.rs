//! Data-parallel helpers over per-rank work.
//!
//! With the `parallel` feature, [`ExecMode::Parallel`] fans work out on the
//! rayon pool. Without it, every mode runs sequentially. Results are always
//! returned in input order, so both paths produce bit-identical output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// True when work will actually be spread across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

pub fn map_mut<T, R, F>(mode: ExecMode, items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect();
    }
    let _ = mode;
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}
