//! Historical image pool: a buffer of past generated fakes shown to the
//! discriminators, the standard stabilization for adversarial training.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_POOL_CAPACITY: usize = 50;

#[derive(Debug, Clone)]
pub struct ImagePool<T: Scalar> {
    capacity: usize,
    buffer: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ImagePool<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ImagePool {
            capacity,
            buffer: Vec::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Offer a fresh fake; receive the volume to show the discriminator.
    ///
    /// While filling, the candidate is stored and returned unchanged. Once
    /// full, a fair coin either returns the candidate or swaps it with a
    /// uniformly chosen stored volume and returns the evicted one.
    pub fn query(&mut self, candidate: Tensor<T>) -> Tensor<T> {
        if self.capacity == 0 {
            return candidate;
        }
        if self.buffer.len() < self.capacity {
            self.buffer.push(candidate.clone());
            return candidate;
        }
        if self.rng.gen_bool(0.5) {
            candidate
        } else {
            let slot = self.rng.gen_range(0..self.capacity);
            std::mem::replace(&mut self.buffer[slot], candidate)
        }
    }

    pub fn buffer(&self) -> &[Tensor<T>] {
        &self.buffer
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn restore(capacity: usize, buffer: Vec<Tensor<T>>, rng: RngState) -> Self {
        ImagePool {
            capacity,
            buffer,
            rng: rng.restore(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(v: f32) -> Tensor<f32> {
        Tensor::filled(&[1, 2, 2, 2], v)
    }

    #[test]
    fn fill_phase_returns_candidates_unchanged() {
        let mut pool = ImagePool::new(50, 1);
        for i in 0..50 {
            let out = pool.query(vol(i as f32));
            assert_eq!(out.data()[0], i as f32);
        }
        assert_eq!(pool.len(), 50);
    }

    #[test]
    fn zero_capacity_always_passes_through() {
        let mut pool = ImagePool::new(0, 1);
        for i in 0..20 {
            assert_eq!(pool.query(vol(i as f32)).data()[0], i as f32);
            assert_eq!(pool.len(), 0);
        }
    }

    #[test]
    fn post_fill_swap_frequency_is_about_half() {
        let mut pool = ImagePool::new(50, 7);
        for i in 0..50 {
            pool.query(vol(i as f32));
        }
        let mut swaps = 0usize;
        let n = 10_000;
        for i in 0..n {
            let candidate = 1000.0 + i as f32;
            let out = pool.query(vol(candidate));
            if out.data()[0] != candidate {
                swaps += 1;
            }
        }
        let freq = swaps as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "swap frequency {freq}");
    }

    #[test]
    fn capacity_never_exceeded_and_seeded_runs_repeat() {
        let run = |seed: u64| {
            let mut pool = ImagePool::new(8, seed);
            let mut outs = Vec::new();
            for i in 0..100 {
                assert!(pool.len() <= 8);
                outs.push(pool.query(vol(i as f32)).data()[0]);
            }
            outs
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let mut pool = ImagePool::new(4, 9);
        for i in 0..30 {
            pool.query(vol(i as f32));
        }
        let mut resumed = ImagePool::restore(4, pool.buffer().to_vec(), pool.rng_state());
        for i in 30..60 {
            let a = pool.query(vol(i as f32));
            let b = resumed.query(vol(i as f32));
            assert_eq!(a.data()[0], b.data()[0]);
        }
    }
}
