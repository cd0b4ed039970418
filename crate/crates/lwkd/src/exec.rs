//! Thread-pool executor. Results come back in input order.

use lwkd_core::BatchExecutor;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, Default)]
pub struct Rayon;

impl BatchExecutor for Rayon {
    fn map<T, R, Fun>(&self, items: &[T], f: Fun) -> Vec<R>
    where
        T: Sync,
        R: Send,
        Fun: Fn(&T) -> R + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }
}
