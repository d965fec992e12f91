//! 3D convolution with analytically derived backward pass.
//!
//! Forward runs as im2col + GEMM over depth slabs; zero padding is folded
//! into the gather's bounds check, reflect padding materializes a padded
//! copy first and routes the input gradient back through
//! [`pad_backward`](crate::tensor::pad_backward).

use crate::tensor::im2col::{
    accum_rows, col2im_add, dot_rows, expand_rows, im2col, panel_positions, slab_ranges, ConvGeom,
    Init,
};
use crate::tensor::{pad, pad_backward, PadMode, Scalar, Tensor, TensorError, VolGeom};

/// Hyper-parameters of a convolution (isotropic: cubic kernels, scalar
/// stride and padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub padding_mode: PadMode,
    /// Extra size appended to every output axis of a transpose convolution;
    /// must be < stride. Ignored by forward convolution.
    pub output_padding: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            padding_mode: PadMode::Zero,
            output_padding: 0,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride,
            padding,
            ..Default::default()
        }
    }

    pub fn reflect(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride,
            padding,
            padding_mode: PadMode::Reflect,
            ..Default::default()
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }
}

pub(crate) struct KernelDims {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

pub(crate) fn kernel_dims<T: Scalar>(kernel: &Tensor<T>) -> Result<KernelDims, TensorError> {
    match *kernel.shape() {
        [a, b, k0, k1, k2] if k0 == k1 && k1 == k2 => Ok(KernelDims {
            c_out: a,
            c_in: b,
            k: k0,
        }),
        _ => Err(TensorError::ShapeMismatch {
            op: "conv kernel",
            expected: vec![0, 0, 0, 0, 0],
            got: kernel.shape().to_vec(),
        }),
    }
}

fn validate<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    params: &ConvParams,
) -> Result<(VolGeom, KernelDims), TensorError> {
    let g = VolGeom::of(input)?;
    let kd = kernel_dims(kernel)?;
    if kd.c_in != g.channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d input channels",
            expected: vec![kd.c_in],
            got: vec![g.channels],
        });
    }
    if bias.shape() != [kd.c_out] {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d bias",
            expected: vec![kd.c_out],
            got: bias.shape().to_vec(),
        });
    }
    if params.stride == 0 {
        return Err(TensorError::InvalidConfig {
            op: "conv3d",
            msg: "stride must be positive".into(),
        });
    }
    for (axis, n) in g.spatial().into_iter().enumerate() {
        let size = (n + 2 * params.padding) as isize - kd.k as isize;
        if size < 0 {
            return Err(TensorError::EmptyOutput {
                op: "conv3d",
                axis,
                size: size / params.stride as isize + 1,
            });
        }
    }
    Ok((g, kd))
}

/// Materialize reflect padding; zero padding stays implicit in the geometry.
fn effective_input<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams,
) -> Result<(Option<Tensor<T>>, usize), TensorError> {
    if params.padding_mode == PadMode::Reflect && params.padding > 0 {
        Ok((Some(pad(input, params.padding, PadMode::Reflect)?), 0))
    } else {
        Ok((None, params.padding))
    }
}

/// `value[o,d,h,w] = bias[o] + sum_{c,i,j,l} input_pad[c, d*s+i, h*s+j, w*s+l] * kernel[o,c,i,j,l]`
///
/// `input` is `[Cin, D, H, W]`, `kernel` `[Cout, Cin, k, k, k]`, `bias` `[Cout]`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    params: &ConvParams,
) -> Result<Tensor<T>, TensorError> {
    let (_, kd) = validate(input, kernel, bias, params)?;
    let (padded, geom_pad) = effective_input(input, params)?;
    let eff = padded.as_ref().unwrap_or(input);
    let eg = VolGeom::of(eff)?;
    let geom = ConvGeom::conv(eg.spatial(), kd.k, params.stride, geom_pad);

    let positions = geom.positions();
    let row_len = geom.row_len(eg.channels);
    let mut out = Tensor::zeros(&[kd.c_out, geom.out_sp[0], geom.out_sp[1], geom.out_sp[2]]);
    let mut cols = vec![T::zero(); panel_positions::<T>(row_len).min(positions) * row_len];

    for (p0, p1) in slab_ranges(positions, panel_positions::<T>(row_len)) {
        let panel = &mut cols[..(p1 - p0) * row_len];
        im2col(eff.data(), eg.channels, &geom, p0, p1, panel);
        dot_rows(
            kernel.data(),
            kd.c_out,
            row_len,
            panel,
            p1 - p0,
            out.data_mut(),
            positions,
            p0,
            Init::Bias(bias.data()),
        );
    }
    Ok(out)
}

/// Gradients of [`conv3d`] w.r.t. input, kernel and bias given the upstream
/// gradient. Shapes mirror the forward arguments exactly.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    params: &ConvParams,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let kd = kernel_dims(kernel)?;
    let (padded, geom_pad) = effective_input(input, params)?;
    let eff = padded.as_ref().unwrap_or(input);
    let eg = VolGeom::of(eff)?;
    let geom = ConvGeom::conv(eg.spatial(), kd.k, params.stride, geom_pad);
    let go = VolGeom::of(grad_out)?;
    if go.channels != kd.c_out || go.spatial() != geom.out_sp {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_backward upstream gradient",
            expected: vec![kd.c_out, geom.out_sp[0], geom.out_sp[1], geom.out_sp[2]],
            got: grad_out.shape().to_vec(),
        });
    }

    let positions = geom.positions();
    let row_len = geom.row_len(eg.channels);

    let mut grad_bias = Tensor::zeros(&[kd.c_out]);
    for (o, gb) in grad_bias.data_mut().iter_mut().enumerate() {
        *gb = grad_out.data()[o * positions..(o + 1) * positions]
            .iter()
            .fold(T::zero(), |a, &v| a + v);
    }

    let mut grad_kernel = Tensor::zeros(&[kd.c_out, kd.c_in, kd.k, kd.k, kd.k]);
    let mut grad_eff = Tensor::zeros(eff.shape());
    let mut cols = vec![T::zero(); panel_positions::<T>(row_len).min(positions) * row_len];

    for (p0, p1) in slab_ranges(positions, panel_positions::<T>(row_len)) {
        let panel = &mut cols[..(p1 - p0) * row_len];
        im2col(eff.data(), eg.channels, &geom, p0, p1, panel);
        accum_rows(
            grad_kernel.data_mut(),
            kd.c_out,
            row_len,
            panel,
            p1 - p0,
            grad_out.data(),
            positions,
            p0,
        );
        // reuse the panel as the expanded gradient rows
        expand_rows(
            panel,
            row_len,
            kernel.data(),
            kd.c_out,
            grad_out.data(),
            positions,
            p0,
        );
        col2im_add(panel, eg.channels, &geom, p0, p1, grad_eff.data_mut());
    }

    let grad_input = if padded.is_some() {
        pad_backward(&grad_eff, params.padding, PadMode::Reflect)?
    } else {
        grad_eff
    };
    Ok((grad_input, grad_kernel, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_3x3x3_sums_to_27() {
        let input = Tensor::filled(&[1, 3, 3, 3], 1.0f64);
        let kernel = Tensor::filled(&[1, 1, 3, 3, 3], 1.0f64);
        let bias = Tensor::zeros(&[1]);
        let out = conv3d(&input, &kernel, &bias, &ConvParams::new(1, 0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert!((out.data()[0] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let data: Vec<f64> = (0..27).map(|v| v as f64 * 0.5 - 3.0).collect();
        let input = Tensor::from_vec(&[1, 3, 3, 3], data);
        let kernel = Tensor::filled(&[1, 1, 1, 1, 1], 1.0f64);
        let bias = Tensor::zeros(&[1]);
        let out = conv3d(&input, &kernel, &bias, &ConvParams::new(1, 0)).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_input_yields_bias_planes() {
        let input = Tensor::zeros(&[2, 4, 5, 6]);
        let kernel = Tensor::filled(&[3, 2, 3, 3, 3], 0.25f32);
        let bias = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let out = conv3d(&input, &kernel, &bias, &ConvParams::new(1, 1)).unwrap();
        assert_eq!(out.shape(), &[3, 4, 5, 6]);
        for o in 0..3 {
            for &v in &out.data()[o * 120..(o + 1) * 120] {
                assert_eq!(v, bias.data()[o]);
            }
        }
    }

    #[test]
    fn stride_two_halves_even_dims() {
        let input = Tensor::filled(&[1, 8, 8, 8], 1.0f32);
        let kernel = Tensor::filled(&[4, 1, 3, 3, 3], 0.1f32);
        let bias = Tensor::zeros(&[4]);
        let out = conv3d(&input, &kernel, &bias, &ConvParams::new(2, 1)).unwrap();
        assert_eq!(out.shape(), &[4, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let input = Tensor::zeros(&[2, 3, 3, 3]);
        let kernel = Tensor::zeros(&[1, 3, 3, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        let err = conv3d::<f32>(&input, &kernel, &bias, &ConvParams::new(1, 0)).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let input = Tensor::zeros(&[1, 2, 2, 2]);
        let kernel = Tensor::zeros(&[1, 1, 5, 5, 5]);
        let bias = Tensor::zeros(&[1]);
        let err = conv3d::<f32>(&input, &kernel, &bias, &ConvParams::new(1, 1)).unwrap_err();
        assert!(matches!(err, TensorError::EmptyOutput { .. }));
    }

    #[test]
    fn grad_bias_sums_upstream_gradient() {
        let input = Tensor::filled(&[1, 3, 3, 3], 0.5f64);
        let kernel = Tensor::filled(&[2, 1, 3, 3, 3], 0.1f64);
        let params = ConvParams::new(1, 1);
        let grad_out = Tensor::filled(&[2, 3, 3, 3], 1.0f64);
        let (_, _, gb) = conv3d_backward(&input, &kernel, &params, &grad_out).unwrap();
        assert_eq!(gb.data(), &[27.0, 27.0]);
    }
}
