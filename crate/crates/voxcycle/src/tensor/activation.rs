//! Elementwise activations and their backward maps.

use crate::exec;
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Negative slope fixed at 0.2.
    LeakyRelu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    pub fn label(self) -> &'static str {
        match self {
            Activation::Relu => "ReLU",
            Activation::LeakyRelu => "LeakyReLU (0.2)",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "Sigmoid",
            Activation::None => "None",
        }
    }

    #[inline]
    fn apply_one<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    T::from_f64(LEAKY_SLOPE) * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::None => x,
        }
    }

    /// Local derivative expressed through the *output* value, so backward
    /// needs no saved input.
    #[inline]
    fn slope_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::from_f64(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::None => T::one(),
        }
    }
}

pub fn activation<T: Scalar>(kind: Activation, input: &Tensor<T>) -> Tensor<T> {
    if kind == Activation::None {
        return input.clone();
    }
    let mut out = input.clone();
    exec::for_each_slab(out.data_mut(), 1 << 14, |_, chunk| {
        for v in chunk {
            *v = kind.apply_one(*v);
        }
    });
    out
}

/// Chain-rule through the elementwise map given the forward output.
pub fn activation_backward<T: Scalar>(
    kind: Activation,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    assert_eq!(output.shape(), grad_out.shape(), "activation grad shape");
    if kind == Activation::None {
        return grad_out.clone();
    }
    let mut grad = grad_out.clone();
    let y = output.data();
    exec::for_each_slab(grad.data_mut(), 1 << 14, |i, chunk| {
        let base = i * (1 << 14);
        for (off, g) in chunk.iter_mut().enumerate() {
            *g = *g * kind.slope_from_output(y[base + off]);
        }
    });
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[values.len()], values.to_vec())
    }

    #[test]
    fn leaky_relu_slope_is_exactly_point_two() {
        let y = activation(Activation::LeakyRelu, &line(&[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let y = activation(Activation::Tanh, &line(&[0.0]));
        assert_eq!(y.data()[0], 0.0);
        let y = activation(Activation::Sigmoid, &line(&[0.0]));
        assert_eq!(y.data()[0], 0.5);
    }

    #[test]
    fn none_is_identity_both_ways() {
        let x = line(&[-2.0, 3.0, 0.5]);
        let y = activation(Activation::None, &x);
        assert_eq!(y, x);
        let g = line(&[1.0, -1.0, 4.0]);
        assert_eq!(activation_backward(Activation::None, &y, &g), g);
    }

    #[test]
    fn ranges_are_respected() {
        let x = line(&[-100.0, -1.0, 0.0, 1.0, 100.0]);
        for &v in activation(Activation::Tanh, &x).data() {
            assert!(v > -1.0 && v < 1.0 || v == -1.0 || v == 1.0); // saturates at f64 limits
            assert!((-1.0..=1.0).contains(&v));
        }
        for &v in activation(Activation::Sigmoid, &x).data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn backward_uses_output_slope() {
        let x = line(&[-3.0, 2.0]);
        let y = activation(Activation::LeakyRelu, &x);
        let g = activation_backward(Activation::LeakyRelu, &y, &line(&[1.0, 1.0]));
        assert_eq!(g.data(), &[0.2, 1.0]);
    }
}
