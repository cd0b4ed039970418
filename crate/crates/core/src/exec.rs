//! Ordered map over independent work items.
//!
//! Training and feature extraction fan out over the utterances of a batch.
//! Implementations must return results in input order so that every
//! reduction downstream happens in a fixed order and stays bitwise
//! reproducible regardless of how the work was scheduled.

use alloc::vec::Vec;

pub trait BatchExecutor {
    fn map<T, R, Fun>(&self, items: &[T], f: Fun) -> Vec<R>
    where
        T: Sync,
        R: Send,
        Fun: Fn(&T) -> R + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchExecutor for Sequential {
    fn map<T, R, Fun>(&self, items: &[T], f: Fun) -> Vec<R>
    where
        T: Sync,
        R: Send,
        Fun: Fn(&T) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }
}
