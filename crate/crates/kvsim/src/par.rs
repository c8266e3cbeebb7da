//! Data-parallel batch helpers with a sequential fallback.
//!
//! With the default `parallel` feature the mapping functions fan out over
//! rayon's global pool; without it they degrade to plain iterator chains.
//! Results always come back in input order, so callers are deterministic
//! either way. The `*_serial` twins are always sequential and exist so the
//! bench suite can compare both paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_batch<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_batch<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Sequential twin of [`map_batch`], for benchmarking against the parallel path.
pub fn map_batch_serial<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Sequential twin of [`map_indices`].
pub fn map_indices_serial<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order() {
        let items: Vec<u64> = (0..1000).collect();
        let doubled = map_batch(&items, |x| x * 2);
        let serial = map_batch_serial(&items, |x| x * 2);
        assert_eq!(doubled, serial);
        assert_eq!(doubled[999], 1998);
    }

    #[test]
    fn indices_match_serial() {
        assert_eq!(map_indices(10, |i| i * i), map_indices_serial(10, |i| i * i));
    }
}
