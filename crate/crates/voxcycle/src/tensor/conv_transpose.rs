//! 3D transpose convolution (learnable upsampling), the adjoint of strided
//! convolution: the forward map here is exactly the input-gradient map of
//! [`conv3d`](crate::tensor::conv3d) with the same kernel.

use crate::exec;
use crate::tensor::conv::{kernel_dims, ConvParams};
use crate::tensor::im2col::{
    accum_rows, col2im_add, dot_rows, expand_rows, im2col, panel_positions, slab_ranges, ConvGeom,
    Init,
};
use crate::tensor::{PadMode, Scalar, Tensor, TensorError, VolGeom};

struct Checked {
    geom: ConvGeom,
    c_in: usize,
    c_out: usize,
}

fn validate<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    params: &ConvParams,
) -> Result<Checked, TensorError> {
    let g = VolGeom::of(input)?;
    // Transpose kernels are stored `[in_channels, out_channels, k, k, k]`.
    let kd = kernel_dims(kernel)?;
    let (c_in, c_out) = (kd.c_out, kd.c_in);
    if c_in != g.channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transpose input channels",
            expected: vec![c_in],
            got: vec![g.channels],
        });
    }
    if params.stride == 0 {
        return Err(TensorError::InvalidConfig {
            op: "conv3d_transpose",
            msg: "stride must be positive".into(),
        });
    }
    if params.output_padding >= params.stride {
        return Err(TensorError::InvalidConfig {
            op: "conv3d_transpose",
            msg: format!(
                "output_padding {} must be smaller than stride {}",
                params.output_padding, params.stride
            ),
        });
    }
    if params.padding_mode == PadMode::Reflect && params.padding > 0 {
        return Err(TensorError::InvalidConfig {
            op: "conv3d_transpose",
            msg: "reflect padding is not defined for transpose convolution".into(),
        });
    }
    for (axis, n) in g.spatial().into_iter().enumerate() {
        let size = ((n - 1) * params.stride + kd.k + params.output_padding) as isize
            - 2 * params.padding as isize;
        if size < 1 {
            return Err(TensorError::EmptyOutput {
                op: "conv3d_transpose",
                axis,
                size,
            });
        }
    }
    Ok(Checked {
        geom: ConvGeom::transpose(
            g.spatial(),
            kd.k,
            params.stride,
            params.padding,
            params.output_padding,
        ),
        c_in,
        c_out,
    })
}

/// Upsample `input` `[Cin, d, h, w]` with `kernel` `[Cin, Cout, k, k, k]`;
/// every output axis has size `(in-1)*stride - 2*padding + k + output_padding`.
pub fn conv3d_transpose<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    params: &ConvParams,
) -> Result<Tensor<T>, TensorError> {
    let ck = validate(input, kernel, params)?;
    if bias.shape() != [ck.c_out] {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transpose bias",
            expected: vec![ck.c_out],
            got: bias.shape().to_vec(),
        });
    }
    let geom = ck.geom;
    let positions = geom.positions();
    let row_len = geom.row_len(ck.c_out);

    let mut out = Tensor::zeros(&[ck.c_out, geom.in_sp[0], geom.in_sp[1], geom.in_sp[2]]);
    let out_plane = geom.in_plane();
    exec::for_each_slab(out.data_mut(), out_plane, |o, plane| {
        plane.fill(bias.data()[o]);
    });

    let mut cols = vec![T::zero(); panel_positions::<T>(row_len).min(positions) * row_len];
    for (p0, p1) in slab_ranges(positions, panel_positions::<T>(row_len)) {
        let panel = &mut cols[..(p1 - p0) * row_len];
        expand_rows(panel, row_len, kernel.data(), ck.c_in, input.data(), positions, p0);
        col2im_add(panel, ck.c_out, &geom, p0, p1, out.data_mut());
    }
    Ok(out)
}

/// Gradients of [`conv3d_transpose`] w.r.t. input, kernel and bias.
pub fn conv3d_transpose_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    params: &ConvParams,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let ck = validate(input, kernel, params)?;
    let geom = ck.geom;
    let go = VolGeom::of(grad_out)?;
    if go.channels != ck.c_out || go.spatial() != geom.in_sp {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transpose_backward upstream gradient",
            expected: vec![ck.c_out, geom.in_sp[0], geom.in_sp[1], geom.in_sp[2]],
            got: grad_out.shape().to_vec(),
        });
    }
    let positions = geom.positions();
    let row_len = geom.row_len(ck.c_out);
    let out_plane = geom.in_plane();

    let mut grad_bias = Tensor::zeros(&[ck.c_out]);
    for (o, gb) in grad_bias.data_mut().iter_mut().enumerate() {
        *gb = grad_out.data()[o * out_plane..(o + 1) * out_plane]
            .iter()
            .fold(T::zero(), |a, &v| a + v);
    }

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut cols = vec![T::zero(); panel_positions::<T>(row_len).min(positions) * row_len];

    for (p0, p1) in slab_ranges(positions, panel_positions::<T>(row_len)) {
        let panel = &mut cols[..(p1 - p0) * row_len];
        // Gather grad_out rows on the sparse grid; then the input gradient is
        // a plain correlation and the kernel gradient an outer accumulation.
        im2col(grad_out.data(), ck.c_out, &geom, p0, p1, panel);
        dot_rows(
            kernel.data(),
            ck.c_in,
            row_len,
            panel,
            p1 - p0,
            grad_input.data_mut(),
            positions,
            p0,
            Init::Accumulate,
        );
        accum_rows(
            grad_kernel.data_mut(),
            ck.c_in,
            row_len,
            panel,
            p1 - p0,
            input.data(),
            positions,
            p0,
        );
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv3d;

    #[test]
    fn scalar_product_case() {
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0f64]);
        let kernel = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![-2.0f64]);
        let bias = Tensor::zeros(&[1]);
        let out = conv3d_transpose(&input, &kernel, &bias, &ConvParams::new(1, 0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], -6.0);
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let input = Tensor::zeros(&[2, 3, 3, 3]);
        let kernel = Tensor::filled(&[2, 3, 3, 3, 3], 0.7f32);
        let bias = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let params = ConvParams::new(2, 1).with_output_padding(1);
        let out = conv3d_transpose(&input, &kernel, &bias, &params).unwrap();
        assert_eq!(out.shape(), &[3, 6, 6, 6]);
        for o in 0..3 {
            for &v in &out.data()[o * 216..(o + 1) * 216] {
                assert_eq!(v, bias.data()[o]);
            }
        }
    }

    #[test]
    fn doubling_configuration_doubles_every_axis() {
        let input = Tensor::zeros(&[128, 38, 45, 30]);
        let kernel = Tensor::zeros(&[128, 2, 3, 3, 3]);
        let bias = Tensor::zeros(&[2]);
        let params = ConvParams::new(2, 1).with_output_padding(1);
        let out = conv3d_transpose::<f32>(&input, &kernel, &bias, &params).unwrap();
        assert_eq!(out.shape(), &[2, 76, 90, 60]);
    }

    #[test]
    fn output_padding_must_stay_below_stride() {
        let input = Tensor::zeros(&[1, 2, 2, 2]);
        let kernel = Tensor::zeros(&[1, 1, 3, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        let params = ConvParams::new(2, 1).with_output_padding(2);
        assert!(conv3d_transpose::<f32>(&input, &kernel, &bias, &params).is_err());
    }

    #[test]
    fn adjoint_identity_with_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with the same kernel tensor.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rnd = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::<f64>::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let x = rnd(&[3, 6, 8, 10]);
        let w = rnd(&[4, 3, 3, 3, 3]);
        let zeros_fwd = Tensor::zeros(&[4]);
        let zeros_bwd = Tensor::zeros(&[3]);
        let params = ConvParams::new(2, 1).with_output_padding(1);
        let cx = conv3d(&x, &w, &zeros_fwd, &params).unwrap();
        let y = rnd(cx.shape());
        let ty = conv3d_transpose(&y, &w, &zeros_bwd, &params).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0),
            "adjoint mismatch: {lhs} vs {rhs}"
        );
    }
}
