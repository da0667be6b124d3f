//! Data-parallel execution helpers.
//!
//! With the default `parallel` feature the mapping helpers fan work out over
//! rayon; without it they run sequentially with identical results. The
//! explicitly sequential variants stay available either way so benchmarks can
//! compare both paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over items, in parallel when the `parallel` feature is enabled.
pub fn map_items<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map over an index range, in parallel when the `parallel` feature is enabled.
pub fn map_range<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Always-sequential counterpart of [`map_range`].
pub fn map_range_seq<R, F>(count: usize, mut f: F) -> Vec<R>
where
    F: FnMut(usize) -> R,
{
    (0..count).map(&mut f).collect()
}
