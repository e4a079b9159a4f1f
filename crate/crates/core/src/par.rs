//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, work runs on rayon (on a scoped pool when a
//! worker count is given). Without it, or with `workers == 1`, items are
//! processed in order on the calling thread. Results are always returned in
//! input order, so callers get identical output either way.

/// Worker-count setting shared by the stage modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Parallelism {
    /// `0` means "use the global rayon pool", `1` forces sequential work.
    pub workers: usize,
}

impl Parallelism {
    pub const SEQUENTIAL: Parallelism = Parallelism { workers: 1 };

    pub fn new(workers: usize) -> Self {
        Self { workers }
    }

    pub fn is_sequential(&self) -> bool {
        self.workers == 1 || !cfg!(feature = "parallel")
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if par.is_sequential() || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    parallel_map(par, items, f)
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let run = || items.par_iter().map(&f).collect::<Vec<_>>();
    if par.workers == 0 {
        return run();
    }
    match rayon::ThreadPoolBuilder::new()
        .num_threads(par.workers)
        .build()
    {
        Ok(pool) => pool.install(run),
        Err(err) => {
            tracing::warn!("could not build a {}-thread pool ({err}); using the global pool", par.workers);
            run()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(_par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
