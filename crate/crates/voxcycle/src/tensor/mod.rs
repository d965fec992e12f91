//! Dense row-major tensors and the differentiable primitive operations.
//!
//! Layout conventions:
//! * activations / volumes: `[channels, depth, height, width]`
//! * convolution kernels: `[out_channels, in_channels, kD, kH, kW]`
//! * transpose-convolution kernels: `[in_channels, out_channels, kD, kH, kW]`

use std::fmt;

use thiserror::Error;

pub mod activation;
pub mod conv;
pub mod conv_transpose;
mod im2col;
mod kernels;
pub mod norm;
pub mod pad;

pub use activation::{activation, activation_backward, Activation};
pub use conv::{conv3d, conv3d_backward, ConvParams};
pub use conv_transpose::{conv3d_transpose, conv3d_transpose_backward};
pub use norm::{instance_norm, instance_norm_backward, InstanceNormCache};
pub use pad::{pad, pad_backward, PadMode};

/// Element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element type of tensors: `f32` for training, `f64` for the
/// finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Dot product of two equal-length slices. The f32 implementation
    /// dispatches to an AVX2 kernel when the CPU supports it.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        kernels::dot_generic(a, b)
    }

    /// `dst += s * src` over equal-length slices.
    fn axpy(dst: &mut [Self], s: Self, src: &[Self]) {
        kernels::axpy_generic(dst, s, src);
    }

    /// Four simultaneous dot products of `x` against four rows.
    fn dot4(rows: [&[Self]; 4], x: &[Self]) -> [Self; 4] {
        kernels::dot4_generic(rows, x)
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        kernels::dot_f32(a, b)
    }
    fn axpy(dst: &mut [Self], s: Self, src: &[Self]) {
        kernels::axpy_f32(dst, s, src);
    }
    fn dot4(rows: [&[Self]; 4], x: &[Self]) -> [Self; 4] {
        kernels::dot4_f32(rows, x)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidConfig { op: &'static str, msg: String },
    #[error("{op}: output size {size} along axis {axis} is not positive")]
    EmptyOutput {
        op: &'static str,
        axis: usize,
        size: isize,
    },
}

/// Dense N-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all elements (fixed left-to-right order).
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Convert elementwise to another scalar type (used by the gradient
    /// checker to lift f32 setups into f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Spatial geometry of a `[C, D, H, W]` activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolGeom {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl VolGeom {
    pub fn of<T: Scalar>(t: &Tensor<T>) -> Result<Self, TensorError> {
        match *t.shape() {
            [c, d, h, w] => Ok(VolGeom {
                channels: c,
                depth: d,
                height: h,
                width: w,
            }),
            _ => Err(TensorError::ShapeMismatch {
                op: "volume geometry",
                expected: vec![0, 0, 0, 0],
                got: t.shape().to_vec(),
            }),
        }
    }

    pub fn plane(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }
}
