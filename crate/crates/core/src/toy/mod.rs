//! Synthetic toy models: feature occlusion between two co-represented attribute
//! families, and feature over-splitting of a two-component Gaussian mixture.

mod occlusion;
mod oversplit;

pub use occlusion::*;
pub use oversplit::*;

use thiserror::Error;

use crate::interp::InterpError;
use crate::sae::SaeError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Dict(#[from] crate::dictionary::DictError),
}

pub type Result<T> = std::result::Result<T, ToyError>;

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Maps `f` over `items` on up to `available_parallelism` threads. Output order
/// matches input order, so results do not depend on the thread count.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}
