//! Runtime layers: a parameterized convolution unit (conv or transpose conv,
//! optional instance norm, activation) and the residual block built from two
//! of them.

use crate::tensor::{
    activation, activation_backward, conv3d, conv3d_backward, conv3d_transpose,
    conv3d_transpose_backward, instance_norm, instance_norm_backward, Activation, ConvParams,
    InstanceNormCache, Scalar, Tensor,
};

use super::NetError;

pub const NORM_EPS: f64 = 1e-5;

/// One convolution with its parameters and post-ops.
#[derive(Debug, Clone)]
pub struct ConvUnit<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    /// `Some((gamma, beta))` when the layer is instance-normalized.
    pub norm: Option<(Tensor<T>, Tensor<T>)>,
    pub conv: ConvParams,
    pub transpose: bool,
    pub activation: Activation,
}

/// Everything the backward pass needs from one unit's forward pass.
#[derive(Debug)]
pub struct ConvTrace<T: Scalar> {
    pub input: Tensor<T>,
    /// Pre-norm convolution output; present iff normalized.
    pub conv_out: Option<Tensor<T>>,
    pub norm: Option<InstanceNormCache<T>>,
    /// Post-activation output; present iff the activation is not `None`.
    pub output: Option<Tensor<T>>,
}

/// Parameter gradients of one unit, in canonical order.
pub struct UnitGrads<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    fn conv_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let y = if self.transpose {
            conv3d_transpose(x, &self.kernel, &self.bias, &self.conv)?
        } else {
            conv3d(x, &self.kernel, &self.bias, &self.conv)?
        };
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut y = self.conv_forward(x)?;
        if let Some((gamma, beta)) = &self.norm {
            y = instance_norm(&y, gamma, beta, T::from_f64(NORM_EPS))?.0;
        }
        Ok(activation(self.activation, &y))
    }

    /// Forward keeping the tensors backward will need. Takes the input by
    /// value; the caller keeps its own copy only when it reuses it.
    pub fn forward_traced(&self, x: Tensor<T>) -> Result<(Tensor<T>, ConvTrace<T>), NetError> {
        let u = self.conv_forward(&x)?;
        let (z, conv_out, norm_cache) = if let Some((gamma, beta)) = &self.norm {
            let (z, cache) = instance_norm(&u, gamma, beta, T::from_f64(NORM_EPS))?;
            (z, Some(u), Some(cache))
        } else {
            (u, None, None)
        };
        let y = activation(self.activation, &z);
        let output = (self.activation != Activation::None).then(|| y.clone());
        Ok((
            y,
            ConvTrace {
                input: x,
                conv_out,
                norm: norm_cache,
                output,
            },
        ))
    }

    /// Chain rule back through activation, norm and convolution. Returns the
    /// gradient w.r.t. the unit input; parameter gradients are computed only
    /// when requested.
    pub fn backward(
        &self,
        trace: &ConvTrace<T>,
        grad_out: &Tensor<T>,
        want_params: bool,
    ) -> Result<(Tensor<T>, Option<UnitGrads<T>>), NetError> {
        let grad_z = match &trace.output {
            Some(y) => activation_backward(self.activation, y, grad_out),
            None => grad_out.clone(),
        };
        let (grad_u, norm_grads) = match (&self.norm, &trace.conv_out, &trace.norm) {
            (Some((gamma, _)), Some(u), Some(cache)) => {
                let (gu, gg, gb) = instance_norm_backward(u, gamma, cache, &grad_z)?;
                (gu, Some((gg, gb)))
            }
            _ => (grad_z, None),
        };
        let (grad_in, grad_kernel, grad_bias) = if self.transpose {
            conv3d_transpose_backward(&trace.input, &self.kernel, &self.conv, &grad_u)?
        } else {
            conv3d_backward(&trace.input, &self.kernel, &self.conv, &grad_u)?
        };
        let grads = want_params.then(|| {
            let (gamma, beta) = match norm_grads {
                Some((g, b)) => (Some(g), Some(b)),
                None => (None, None),
            };
            UnitGrads {
                kernel: grad_kernel,
                bias: grad_bias,
                gamma,
                beta,
            }
        });
        Ok((grad_in, grads))
    }
}

/// Residual block: conv-norm-ReLU, conv-norm, additive skip, no activation
/// after the addition.
#[derive(Debug, Clone)]
pub struct ResBlock<T: Scalar> {
    pub conv1: ConvUnit<T>,
    pub conv2: ConvUnit<T>,
}

#[derive(Debug)]
pub struct ResTrace<T: Scalar> {
    pub t1: ConvTrace<T>,
    pub t2: ConvTrace<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let h = self.conv1.forward(x)?;
        let mut y = self.conv2.forward(&h)?;
        y.add_assign(x);
        Ok(y)
    }

    pub fn forward_traced(&self, x: Tensor<T>) -> Result<(Tensor<T>, ResTrace<T>), NetError> {
        let (h, t1) = self.conv1.forward_traced(x)?;
        let (mut y, t2) = self.conv2.forward_traced(h)?;
        y.add_assign(&t1.input);
        Ok((y, ResTrace { t1, t2 }))
    }

    pub fn backward(
        &self,
        trace: &ResTrace<T>,
        grad_out: &Tensor<T>,
        want_params: bool,
    ) -> Result<(Tensor<T>, Option<(UnitGrads<T>, UnitGrads<T>)>), NetError> {
        let (grad_h, g2) = self.conv2.backward(&trace.t2, grad_out, want_params)?;
        let (mut grad_x, g1) = self.conv1.backward(&trace.t1, &grad_h, want_params)?;
        grad_x.add_assign(grad_out); // skip connection
        let grads = match (g1, g2) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        Ok((grad_x, grads))
    }
}
