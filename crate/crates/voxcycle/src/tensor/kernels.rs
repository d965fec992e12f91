//! Inner-loop numeric kernels: dot products and axpy updates.
//!
//! The generic bodies are written so LLVM can auto-vectorize them; on x86_64
//! the f32 entry points re-instantiate the same bodies inside
//! `#[target_feature(enable = "avx2,fma")]` wrappers and pick the fastest
//! variant once at startup. Accumulation order within a kernel is fixed, so
//! every variant is deterministic for a given build.

const LANES: usize = 16;

#[inline(always)]
pub fn dot_generic<T: crate::tensor::Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut total = tail;
    for l in 0..LANES {
        total += acc[l];
    }
    total
}

#[inline(always)]
pub fn axpy_generic<T: crate::tensor::Scalar>(dst: &mut [T], s: T, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

#[inline(always)]
pub fn dot4_generic<T: crate::tensor::Scalar>(rows: [&[T]; 4], x: &[T]) -> [T; 4] {
    // One pass over x with four accumulator banks; keeps x hot and quarters
    // its memory traffic versus four separate dots.
    let mut acc = [[T::zero(); LANES]; 4];
    let n = x.len();
    let whole = n - n % LANES;
    let it = x[..whole]
        .chunks_exact(LANES)
        .zip(rows[0][..whole].chunks_exact(LANES))
        .zip(rows[1][..whole].chunks_exact(LANES))
        .zip(rows[2][..whole].chunks_exact(LANES))
        .zip(rows[3][..whole].chunks_exact(LANES));
    for ((((cx, c0), c1), c2), c3) in it {
        for l in 0..LANES {
            acc[0][l] += c0[l] * cx[l];
            acc[1][l] += c1[l] * cx[l];
            acc[2][l] += c2[l] * cx[l];
            acc[3][l] += c3[l] * cx[l];
        }
    }
    let mut out = [T::zero(); 4];
    for (r, bank) in acc.iter().enumerate() {
        let mut tail = T::zero();
        for i in whole..n {
            tail += rows[r][i] * x[i];
        }
        let mut total = tail;
        for &v in bank {
            total += v;
        }
        out[r] = total;
    }
    out
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
        dot_generic(a, b)
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn axpy_avx2(dst: &mut [f32], s: f32, src: &[f32]) {
        axpy_generic(dst, s, src)
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn dot4_avx2(rows: [&[f32]; 4], x: &[f32]) -> [f32; 4] {
        dot4_generic(rows, x)
    }

    pub fn avx2_available() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
}

#[cfg(target_arch = "x86_64")]
fn use_avx2() -> bool {
    use std::sync::OnceLock;
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(x86::avx2_available)
}

pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    {
        if use_avx2() {
            // Safety: feature presence checked at startup.
            return unsafe { x86::dot_avx2(a, b) };
        }
    }
    dot_generic(a, b)
}

pub fn axpy_f32(dst: &mut [f32], s: f32, src: &[f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if use_avx2() {
            return unsafe { x86::axpy_avx2(dst, s, src) };
        }
    }
    axpy_generic(dst, s, src)
}

pub fn dot4_f32(rows: [&[f32]; 4], x: &[f32]) -> [f32; 4] {
    #[cfg(target_arch = "x86_64")]
    {
        if use_avx2() {
            return unsafe { x86::dot4_avx2(rows, x) };
        }
    }
    dot4_generic(rows, x)
}
