//! Data-parallel helpers.
//!
//! With the `parallel` feature the maps run on a rayon pool; without it they
//! run sequentially. Results are always returned in input order so that
//! output never depends on the worker count.

use serde::{Deserialize, Serialize};

/// Requested worker count; `0` means "use the default pool".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Workers(pub usize);

impl Workers {
    pub const SEQUENTIAL: Workers = Workers(1);

    /// Reads `EGUIDE_WORKERS`, falling back to the default pool.
    pub fn from_env() -> Self {
        std::env::var("EGUIDE_WORKERS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .map(Workers)
            .unwrap_or_default()
    }

    pub fn is_sequential(&self) -> bool {
        self.0 == 1 || !cfg!(feature = "parallel")
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(workers: Workers, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if workers.is_sequential() || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    par_map(workers, items, f)
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(workers: Workers, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(workers, &idx, |&i| f(i))
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(workers: Workers, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if workers.0 == 0 {
        return items.par_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers.0).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not build a {}-thread pool ({e}); running sequentially", workers.0);
            items.iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(_workers: Workers, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(Workers(0), &xs, |x| x * x);
        let b = map(Workers::SEQUENTIAL, &xs, |x| x * x);
        let c = map(Workers(3), &xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(map_range(Workers(2), 5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }
}
