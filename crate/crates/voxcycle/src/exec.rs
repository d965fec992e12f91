//! Execution-mode control: rayon data-parallel kernels with a sequential
//! fallback.
//!
//! Compiled without the `parallel` feature the crate has no rayon dependency
//! and every kernel runs sequentially. With the feature (the default) a
//! runtime switch selects between the two paths, so benchmarks can compare
//! them in one process and `--deterministic` can force single-threaded
//! execution.
//!
//! Parallel loops in this crate only ever hand out disjoint `&mut` slabs of
//! the output and keep the per-element accumulation order fixed, so the two
//! paths produce bitwise-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path at runtime (no effect when the crate was built
/// without the `parallel` feature, which is always sequential).
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// True if kernels will run on the sequential path.
pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || SEQUENTIAL.load(Ordering::Relaxed)
}

/// Cap the rayon worker count. Call once, before any parallel work; later
/// calls (or a pool that already exists) leave the current pool in place.
/// `threads == 1` also flips the sequential switch.
pub fn configure_threads(threads: usize) {
    if threads <= 1 {
        set_sequential(true);
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
}

/// Read a worker cap from the given environment variable (e.g.
/// `VOXCYCLE_THREADS`) and apply it. Unset or unparsable values are ignored.
pub fn configure_threads_from_env(var: &str) {
    if let Ok(s) = std::env::var(var) {
        if let Ok(n) = s.trim().parse::<usize>() {
            configure_threads(n);
        }
    }
}

/// Run `f(slab_index, slab)` over consecutive `slab_len` chunks of `data`
/// (the tail chunk may be shorter), in parallel when enabled.
pub fn for_each_slab<T, F>(data: &mut [T], slab_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(slab_len > 0, "slab_len must be positive");
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            data.par_chunks_mut(slab_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    for (i, chunk) in data.chunks_mut(slab_len).enumerate() {
        f(i, chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_iteration_covers_everything_once() {
        let mut v = vec![0u32; 13];
        for_each_slab(&mut v, 4, |i, chunk| {
            for x in chunk {
                *x += 1 + i as u32;
            }
        });
        assert_eq!(v[0..4], [1, 1, 1, 1]);
        assert_eq!(v[4..8], [2, 2, 2, 2]);
        assert_eq!(v[8..12], [3, 3, 3, 3]);
        assert_eq!(v[12], 4);
    }

    #[test]
    fn sequential_switch_round_trips() {
        let before = is_sequential();
        set_sequential(true);
        assert!(is_sequential());
        set_sequential(false);
        set_sequential(before);
    }
}
