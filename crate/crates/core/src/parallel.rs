//! Order-preserving parallel map over independent jobs.

use rayon::prelude::*;

/// Apply `f` to every item on a pool of `workers` threads. Results come back
/// in input order; jobs share nothing but the read-only closure.
pub fn map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
        Err(_) => items.into_iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn preserves_order_for_any_worker_count() {
        for w in [1, 2, 7] {
            let out = super::map((0..20).collect(), w, |x: i32| x * x);
            assert_eq!(out, (0..20).map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(super::map(Vec::<i32>::new(), 4, |x| x).is_empty());
    }
}
