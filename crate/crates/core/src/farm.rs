//! Replica farm: ordered parallel map over seeds.

use rayon::prelude::*;

use crate::error::{invalid, Result};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "SHEGRAD_WORKERS";

/// Worker count from an explicit value, then the environment, then the CPU count.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Run `f(index, seed)` for `seed = base_seed + index`. Results come back in
/// index order, so any reduction over them is independent of `workers`.
pub fn map_replicas<T, F>(count: usize, base_seed: u64, workers: usize, f: F) -> Result<Vec<Result<T>>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync + Send,
{
    if workers == 0 {
        return Err(invalid("worker count must be positive"));
    }
    let job = || {
        (0..count)
            .into_par_iter()
            .map(|i| f(i, base_seed.wrapping_add(i as u64)))
            .collect()
    };
    if workers == 1 {
        return Ok((0..count).map(|i| f(i, base_seed.wrapping_add(i as u64))).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Split results into successes and the indices that failed.
pub fn partition<T>(results: Vec<Result<T>>) -> (Vec<T>, Vec<(usize, String)>) {
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push((i, e.to_string())),
        }
    }
    (ok, failed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn ordered_and_worker_independent() {
        let f = |i: usize, s: u64| -> Result<u64> { Ok(s * 3 + i as u64) };
        let a = map_replicas(50, 10, 1, f).unwrap();
        let b = map_replicas(50, 10, 3, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[4], Ok(10 * 3 + 4 * 3 + 4));
        assert!(map_replicas(5, 0, 0, f).is_err());
    }

    #[test]
    fn failures_are_reported_by_index() {
        let r = map_replicas(6, 0, 2, |i, _| {
            if i == 3 {
                Err(Error::Insufficient("x".into()))
            } else {
                Ok(i)
            }
        })
        .unwrap();
        let (ok, bad) = partition(r);
        assert_eq!(ok, vec![0, 1, 2, 4, 5]);
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].0, 3);
    }
}
