//! Optional clip-level parallelism with a bitwise-deterministic contract.
//!
//! `DASC_THREADS=1` forces the sequential reference path. Any other setting
//! (or none) allows data-parallel maps over independent clips; results are
//! collected in input order and reduced sequentially, so outputs are
//! bitwise identical at every thread count. Training steps are always
//! sequential regardless.

use rayon::prelude::*;
use std::sync::OnceLock;

fn configured_threads() -> Option<usize> {
    match std::env::var("DASC_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok(),
        Err(_) => None,
    }
}

fn pool(threads: usize) -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
    })
    .as_ref()
}

/// Map `f` over `items`, preserving input order in the output.
pub fn map_ordered<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match configured_threads() {
        Some(1) => items.iter().map(f).collect(),
        Some(n) if n > 1 => match pool(n) {
            Some(p) => p.install(|| items.par_iter().map(f).collect()),
            None => items.iter().map(f).collect(),
        },
        _ => items.par_iter().map(f).collect(),
    }
}
