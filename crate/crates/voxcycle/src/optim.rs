//! Adam with bias correction and the two-phase learning-rate schedule
//! (constant, then linear decay to zero).

use thiserror::Error;

use crate::net::{GradStore, Network};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient store does not match optimizer state: expected {expected} tensors, got {got}")]
    GradCountMismatch { expected: usize, got: usize },
    #[error("gradient {name} has shape {got:?}, parameter has {expected:?}")]
    GradShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("epoch {epoch} outside schedule range 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
}

/// Optimizer hyper-parameters. The low beta1 is the usual choice for
/// adversarial training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub hyper: AdamHyper,
    pub t: u64,
    pub first: Vec<(String, Tensor<T>)>,
    pub second: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_network(net: &Network<T>, hyper: AdamHyper) -> Self {
        let mut first = Vec::new();
        let mut second = Vec::new();
        net.for_each_param(|name, t| {
            first.push((name.to_string(), Tensor::zeros(t.shape())));
            second.push((name.to_string(), Tensor::zeros(t.shape())));
        });
        AdamState {
            hyper,
            t: 0,
            first,
            second,
        }
    }

    /// One bias-corrected update of every network parameter, at the given
    /// learning rate. Gradients must align with the parameter traversal.
    pub fn step(
        &mut self,
        net: &mut Network<T>,
        grads: &GradStore<T>,
        lr: f64,
    ) -> Result<(), OptimError> {
        if grads.len() != self.first.len() {
            return Err(OptimError::GradCountMismatch {
                expected: self.first.len(),
                got: grads.len(),
            });
        }
        self.t += 1;
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let corr1 = 1.0 - b1.powi(self.t as i32);
        let corr2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let one = T::one();
        let eps = T::from_f64(self.hyper.eps);
        let scale = T::from_f64(lr / corr1);
        let corr2s = T::from_f64(1.0 / corr2.sqrt());

        let mut idx = 0usize;
        let mut status = Ok(());
        net.for_each_param_mut(|name, param| {
            if status.is_err() {
                return;
            }
            let (gname, grad) = &grads[idx];
            if gname != name || grad.shape() != param.shape() {
                status = Err(OptimError::GradShapeMismatch {
                    name: name.to_string(),
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
                return;
            }
            let m = self.first[idx].1.data_mut();
            let v = self.second[idx].1.data_mut();
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1t * *m + (one - b1t) * g;
                *v = b2t * *v + (one - b2t) * g * g;
                let denom = (*v).sqrt() * corr2s + eps;
                *p = *p - scale * *m / denom;
            }
            idx += 1;
        });
        status
    }
}

pub const DEFAULT_TOTAL_EPOCHS: usize = 200;
pub const DEFAULT_CONSTANT_EPOCHS: usize = 100;

/// Base rate for the constant phase, then linear decay reaching zero exactly
/// at `total_epochs`.
pub fn lr_schedule(
    epoch: usize,
    base_lr: f64,
    total_epochs: usize,
    constant_epochs: usize,
) -> Result<f64, OptimError> {
    if epoch < 1 || epoch > total_epochs {
        return Err(OptimError::EpochOutOfRange {
            epoch,
            total: total_epochs,
        });
    }
    if epoch <= constant_epochs {
        Ok(base_lr)
    } else {
        Ok(base_lr * (total_epochs - epoch) as f64 / (total_epochs - constant_epochs) as f64)
    }
}
