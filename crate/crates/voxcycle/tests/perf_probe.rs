//! Rough throughput probe for the convolution kernels at training shapes.
//! Run with `cargo test --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use voxcycle::tensor::{conv3d, conv3d_backward, ConvParams, Tensor};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn time_conv(name: &str, input_shape: &[usize], kernel_shape: &[usize], params: ConvParams) {
    let input = rand_tensor(input_shape, 1);
    let kernel = rand_tensor(kernel_shape, 2);
    let bias = Tensor::zeros(&[kernel_shape[0]]);
    let out = conv3d(&input, &kernel, &bias, &params).unwrap();
    let positions: usize = out.shape()[1..].iter().product();
    let macs = positions * kernel_shape.iter().product::<usize>();

    let reps = (200_000_000 / macs).clamp(1, 50);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = conv3d(&input, &kernel, &bias, &params).unwrap();
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;

    let grad_out = rand_tensor(out.shape(), 3);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = conv3d_backward(&input, &kernel, &params, &grad_out).unwrap();
    }
    let bwd = t.elapsed().as_secs_f64() / reps as f64;
    println!(
        "{name}: {:.1} MMAC  fwd {:.2} ms ({:.2} GFLOP/s)  bwd {:.2} ms ({:.2} GFLOP/s)",
        macs as f64 / 1e6,
        fwd * 1e3,
        2.0 * macs as f64 / fwd / 1e9,
        bwd * 1e3,
        2.0 * 2.0 * macs as f64 / bwd / 1e9,
    );
}

#[test]
#[ignore]
fn conv_throughput() {
    time_conv("gen L1 1->32 k7 24^3", &[1, 24, 24, 24], &[32, 1, 7, 7, 7], ConvParams::reflect(1, 3));
    time_conv("gen L2 32->64 k3 s2", &[32, 24, 24, 24], &[64, 32, 3, 3, 3], ConvParams::new(2, 1));
    time_conv("res 128->128 k3 6^3", &[128, 6, 6, 6], &[128, 128, 3, 3, 3], ConvParams::reflect(1, 1));
    time_conv("disc L3 128->256 k4", &[128, 6, 6, 6], &[256, 128, 4, 4, 4], ConvParams::new(1, 1));
    time_conv("disc L4 256->512 k4", &[256, 5, 5, 5], &[512, 256, 4, 4, 4], ConvParams::new(1, 1));
}
