//! Shared helpers for integration tests: an independent reference
//! convolution (literal seven nested loops) and small tensor utilities.
//! Nothing here calls into the optimized im2col/GEMM path it is used to
//! check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxcycle::tensor::{PadMode, Tensor};

pub fn rand_tensor_f32(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Mirror-without-border-repeat index map.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    (if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

/// Reference 3D convolution: materializes its own padding and runs the
/// definition directly.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv3d(
    input: &Tensor<f32>,
    kernel: &Tensor<f32>,
    bias: &[f32],
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Tensor<f32> {
    let ish = input.shape();
    let ksh = kernel.shape();
    let (cin, d, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    let (cout, k) = (ksh[0], ksh[2]);
    assert_eq!(ksh[1], cin);

    // independent padded copy
    let (pd, ph, pw) = (d + 2 * padding, h + 2 * padding, w + 2 * padding);
    let mut padded = vec![0.0f32; cin * pd * ph * pw];
    for c in 0..cin {
        for z in 0..pd {
            for y in 0..ph {
                for x in 0..pw {
                    let (sz, sy, sx) = (
                        z as isize - padding as isize,
                        y as isize - padding as isize,
                        x as isize - padding as isize,
                    );
                    let v = match mode {
                        PadMode::Zero => {
                            if sz < 0
                                || sz >= d as isize
                                || sy < 0
                                || sy >= h as isize
                                || sx < 0
                                || sx >= w as isize
                            {
                                0.0
                            } else {
                                input.data()
                                    [((c * d + sz as usize) * h + sy as usize) * w + sx as usize]
                            }
                        }
                        PadMode::Reflect => {
                            input.data()[((c * d + reflect(sz, d)) * h + reflect(sy, h)) * w
                                + reflect(sx, w)]
                        }
                    };
                    padded[((c * pd + z) * ph + y) * pw + x] = v;
                }
            }
        }
    }

    let od = (pd - k) / stride + 1;
    let oh = (ph - k) / stride + 1;
    let ow = (pw - k) / stride + 1;
    let mut out = vec![0.0f32; cout * od * oh * ow];
    for o in 0..cout {
        for zd in 0..od {
            for yh in 0..oh {
                for xw in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for i in 0..k {
                            for j in 0..k {
                                for l in 0..k {
                                    let pz = zd * stride + i;
                                    let py = yh * stride + j;
                                    let px = xw * stride + l;
                                    acc += padded[((c * pd + pz) * ph + py) * pw + px]
                                        * kernel.data()
                                            [(((o * cin + c) * k + i) * k + j) * k + l];
                                }
                            }
                        }
                    }
                    out[((o * od + zd) * oh + yh) * ow + xw] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[cout, od, oh, ow], out)
}

pub fn max_rel_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a
        .data()
        .iter()
        .map(|v| v.abs() as f64)
        .fold(1.0f64, f64::max);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x as f64) - (y as f64)).abs() / scale)
        .fold(0.0, f64::max)
}
