//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool once the
//! workload passes a size threshold. Without it (or after
//! [`set_parallel(false)`](set_parallel)) everything runs on the calling
//! thread. Every helper produces bitwise-identical results in both modes:
//! work is split by output element, and each element is reduced in a fixed
//! order.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Minimum number of scalar multiply-adds before a kernel is split.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Turns the parallel paths on or off at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(row_index, row)` for every `cols`-wide row of `out`.
/// `work` is the caller's estimate of the total cost.
pub fn for_each_row<F>(out: &mut [f64], cols: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && work >= MIN_PARALLEL_WORK && out.len() > cols {
            out.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    out.chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Order-preserving map over a slice.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && items.len() > 1 {
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_visited_once_in_both_modes() {
        for parallel in [false, true] {
            set_parallel(parallel);
            let mut out = vec![0.0; 12];
            for_each_row(&mut out, 3, usize::MAX, |i, row| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (i * 3 + j) as f64;
                }
            });
            assert_eq!(out, (0..12).map(|v| v as f64).collect::<Vec<_>>());
        }
        set_parallel(true);
    }

    #[test]
    fn map_preserves_order() {
        let items: Vec<u32> = (0..100).collect();
        let doubled = map_collect(&items, |v| v * 2);
        assert_eq!(doubled[37], 74);
        assert_eq!(doubled.len(), 100);
    }
}
