//! Instance normalization: per-channel standardization over the spatial
//! voxels with learned scale and shift.

use crate::exec;
use crate::tensor::{Scalar, Tensor, TensorError, VolGeom};

/// Per-channel statistics saved by the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct InstanceNormCache<T: Scalar> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

fn validate<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<VolGeom, TensorError> {
    let g = VolGeom::of(input)?;
    if gamma.shape() != [g.channels] || beta.shape() != [g.channels] {
        return Err(TensorError::ShapeMismatch {
            op: "instance_norm scale/shift",
            expected: vec![g.channels],
            got: gamma.shape().to_vec(),
        });
    }
    if g.plane() < 2 {
        return Err(TensorError::InvalidConfig {
            op: "instance_norm",
            msg: "spatial size 1 has degenerate statistics".into(),
        });
    }
    Ok(g)
}

/// `y[c] = (x[c] - mean_c) / sqrt(var_c + eps) * gamma[c] + beta[c]`,
/// statistics taken over each channel's voxels (population variance).
pub fn instance_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, InstanceNormCache<T>), TensorError> {
    let g = validate(input, gamma, beta)?;
    let plane = g.plane();
    let n = T::from_f64(plane as f64);

    let mut out = Tensor::zeros(input.shape());
    let mut mean = vec![T::zero(); g.channels];
    let mut inv_std = vec![T::zero(); g.channels];
    // Stats are tiny; compute them first so the fill loop can parallelize
    // over channels without sharing mutable state.
    for c in 0..g.channels {
        let x = &input.data()[c * plane..(c + 1) * plane];
        let mu = x.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = x
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu))
            / n;
        mean[c] = mu;
        inv_std[c] = T::one() / (var + eps).sqrt();
    }
    let src = input.data();
    exec::for_each_slab(out.data_mut(), plane, |c, y| {
        let x = &src[c * plane..(c + 1) * plane];
        let (mu, inv) = (mean[c], inv_std[c]);
        let (ga, be) = (gamma.data()[c], beta.data()[c]);
        for (yo, &xi) in y.iter_mut().zip(x) {
            *yo = (xi - mu) * inv * ga + be;
        }
    });
    Ok((out, InstanceNormCache { mean, inv_std }))
}

/// Gradients w.r.t. input, gamma and beta via the chain rule through the
/// per-channel mean and variance:
/// `dx = inv * gamma * (g - mean(g) - xhat * mean(g * xhat))`.
pub fn instance_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &InstanceNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let g = VolGeom::of(input)?;
    if grad_out.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "instance_norm_backward",
            expected: input.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let plane = g.plane();
    let n = T::from_f64(plane as f64);

    let mut grad_gamma = Tensor::zeros(&[g.channels]);
    let mut grad_beta = Tensor::zeros(&[g.channels]);
    for c in 0..g.channels {
        let x = &input.data()[c * plane..(c + 1) * plane];
        let go = &grad_out.data()[c * plane..(c + 1) * plane];
        let (mu, inv) = (cache.mean[c], cache.inv_std[c]);
        let mut dg = T::zero();
        let mut db = T::zero();
        for (&xi, &gi) in x.iter().zip(go) {
            dg += gi * (xi - mu) * inv;
            db += gi;
        }
        grad_gamma.data_mut()[c] = dg;
        grad_beta.data_mut()[c] = db;
    }

    let mut grad_input = Tensor::zeros(input.shape());
    let src = input.data();
    let gout = grad_out.data();
    let gg = grad_gamma.data().to_vec();
    let gb = grad_beta.data().to_vec();
    exec::for_each_slab(grad_input.data_mut(), plane, |c, gx| {
        let x = &src[c * plane..(c + 1) * plane];
        let go = &gout[c * plane..(c + 1) * plane];
        let (mu, inv) = (cache.mean[c], cache.inv_std[c]);
        let ga = gamma.data()[c];
        let mean_g = gb[c] / n;
        let mean_g_xhat = gg[c] / n;
        for ((dx, &gi), &xi) in gx.iter_mut().zip(go).zip(x) {
            let xhat = (xi - mu) * inv;
            *dx = inv * ga * (gi - mean_g - xhat * mean_g_xhat);
        }
    });
    Ok((grad_input, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_voxel_channel_standardizes() {
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0f64, 2.0, 3.0]);
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let (y, _) = instance_norm(&x, &gamma, &beta, 1e-12).unwrap();
        let want = [-1.224744871, 0.0, 1.224744871];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::filled(&[2, 2, 2, 2], 7.0f32);
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::from_vec(&[2], vec![0.0, -3.0]);
        let (y, _) = instance_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in &y.data()[0..8] {
            assert_eq!(v, 0.0);
        }
        for &v in &y.data()[8..16] {
            assert_eq!(v, -3.0);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, -4.0, 2.5, 0.0]);
        let gamma = Tensor::zeros(&[1]);
        let beta = Tensor::filled(&[1], 0.25);
        let (y, _) = instance_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_voxel_channel_is_rejected() {
        let x = Tensor::filled(&[1, 1, 1, 1], 1.0f32);
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        assert!(instance_norm(&x, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn output_statistics_are_standardized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 4 * 6 * 6 * 6;
        let x = Tensor::<f64>::from_vec(
            &[4, 6, 6, 6],
            (0..n).map(|_| rng.gen_range(-3.0..5.0)).collect(),
        );
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let (y, _) = instance_norm(&x, &gamma, &beta, 1e-10).unwrap();
        let plane = 216;
        for c in 0..4 {
            let ch = &y.data()[c * plane..(c + 1) * plane];
            let mean: f64 = ch.iter().sum::<f64>() / plane as f64;
            let var: f64 = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
