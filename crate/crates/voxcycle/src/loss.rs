//! CycleGAN objectives: least-squares adversarial loss on sigmoid score
//! maps, L1 cycle consistency, and the combined generator / discriminator
//! objectives with full backpropagation through all four networks.

use thiserror::Error;

use crate::net::{GradStore, NetError, Network};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss over an empty tensor is undefined")]
    EmptyTensor,
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Weighting of the objective terms. The cycle weight of 10 is the standard
/// CycleGAN default; identity loss is off unless explicitly enabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cycle: 10.0,
            lambda_identity: 0.0,
        }
    }
}

/// Mean squared error of a score map against an all-ones (real) or
/// all-zeros (fake) target.
pub fn adversarial_loss<T: Scalar>(
    scores: &Tensor<T>,
    target_is_real: bool,
) -> Result<f64, LossError> {
    if scores.numel() == 0 {
        return Err(LossError::EmptyTensor);
    }
    let target = if target_is_real { 1.0 } else { 0.0 };
    let sum: f64 = scores
        .iter()
        .map(|&s| {
            let d = s.as_f64() - target;
            d * d
        })
        .sum();
    Ok(sum / scores.numel() as f64)
}

/// `d adversarial_loss / d scores`, scaled by `weight`.
fn adversarial_grad<T: Scalar>(scores: &Tensor<T>, target_is_real: bool, weight: f64) -> Tensor<T> {
    let target = if target_is_real { T::one() } else { T::zero() };
    let scale = T::from_f64(2.0 * weight / scores.numel() as f64);
    scores.map(|s| (s - target) * scale)
}

/// Mean absolute error between a reconstruction and its original.
pub fn cycle_loss<T: Scalar>(
    reconstructed: &Tensor<T>,
    original: &Tensor<T>,
) -> Result<f64, LossError> {
    if reconstructed.shape() != original.shape() {
        return Err(LossError::ShapeMismatch {
            a: reconstructed.shape().to_vec(),
            b: original.shape().to_vec(),
        });
    }
    if reconstructed.numel() == 0 {
        return Err(LossError::EmptyTensor);
    }
    let sum: f64 = reconstructed
        .iter()
        .zip(original.iter())
        .map(|(&r, &o)| (r.as_f64() - o.as_f64()).abs())
        .sum();
    Ok(sum / reconstructed.numel() as f64)
}

/// `d cycle_loss / d reconstructed`, scaled by `weight`.
fn cycle_grad<T: Scalar>(reconstructed: &Tensor<T>, original: &Tensor<T>, weight: f64) -> Tensor<T> {
    let scale = T::from_f64(weight / reconstructed.numel() as f64);
    let mut grad = Tensor::zeros(reconstructed.shape());
    for ((g, &r), &o) in grad
        .data_mut()
        .iter_mut()
        .zip(reconstructed.data())
        .zip(original.data())
    {
        *g = if r > o {
            scale
        } else if r < o {
            -scale
        } else {
            T::zero()
        };
    }
    grad
}

fn add_grad_stores<T: Scalar>(mut a: GradStore<T>, b: GradStore<T>) -> GradStore<T> {
    assert_eq!(a.len(), b.len(), "gradient stores from the same network");
    for ((an, at), (bn, bt)) in a.iter_mut().zip(b) {
        assert_eq!(*an, bn, "gradient name mismatch");
        at.add_assign(&bt);
    }
    a
}

/// Everything the trainer needs from one generator update: the loss
/// breakdown, gradients for both generators, and the fresh fakes destined
/// for the image pools.
pub struct GeneratorObjective<T: Scalar> {
    pub total: f64,
    pub adv_a2b: f64,
    pub adv_b2a: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub identity_a: f64,
    pub identity_b: f64,
    pub fake_a: Tensor<T>,
    pub fake_b: Tensor<T>,
    pub grads_a2b: GradStore<T>,
    pub grads_b2a: GradStore<T>,
}

/// Adversarial + cycle (+ optional identity) objective for both generators.
///
/// Discriminators contribute gradients w.r.t. their inputs only; their
/// parameters are untouched here.
pub fn generator_objective<T: Scalar>(
    real_a: &Tensor<T>,
    real_b: &Tensor<T>,
    g_a2b: &Network<T>,
    g_b2a: &Network<T>,
    d_a: &Network<T>,
    d_b: &Network<T>,
    w: &LossWeights,
) -> Result<GeneratorObjective<T>, LossError> {
    // forward graph
    let (fake_b, tr_a2b) = g_a2b.forward_cached(real_a)?;
    let (rec_a, tr_rec_a) = g_b2a.forward_cached(&fake_b)?;
    let (fake_a, tr_b2a) = g_b2a.forward_cached(real_b)?;
    let (rec_b, tr_rec_b) = g_a2b.forward_cached(&fake_a)?;
    let (scores_b, tr_db) = d_b.forward_cached(&fake_b)?;
    let (scores_a, tr_da) = d_a.forward_cached(&fake_a)?;

    let adv_a2b = adversarial_loss(&scores_b, true)?;
    let adv_b2a = adversarial_loss(&scores_a, true)?;
    let cycle_a = cycle_loss(&rec_a, real_a)?;
    let cycle_b = cycle_loss(&rec_b, real_b)?;

    // backward, A -> B -> A path
    let (g_fake_b_adv, _) = d_b.backward(&tr_db, &adversarial_grad(&scores_b, true, 1.0), false)?;
    let (mut g_fake_b, grads_b2a_rec) = g_b2a.backward(
        &tr_rec_a,
        &cycle_grad(&rec_a, real_a, w.lambda_cycle),
        true,
    )?;
    g_fake_b.add_assign(&g_fake_b_adv);
    let (_, grads_a2b_main) = g_a2b.backward(&tr_a2b, &g_fake_b, true)?;

    // backward, B -> A -> B path
    let (g_fake_a_adv, _) = d_a.backward(&tr_da, &adversarial_grad(&scores_a, true, 1.0), false)?;
    let (mut g_fake_a, grads_a2b_rec) = g_a2b.backward(
        &tr_rec_b,
        &cycle_grad(&rec_b, real_b, w.lambda_cycle),
        true,
    )?;
    g_fake_a.add_assign(&g_fake_a_adv);
    let (_, grads_b2a_main) = g_b2a.backward(&tr_b2a, &g_fake_a, true)?;

    let mut grads_a2b = add_grad_stores(grads_a2b_main.unwrap(), grads_a2b_rec.unwrap());
    let mut grads_b2a = add_grad_stores(grads_b2a_main.unwrap(), grads_b2a_rec.unwrap());

    // optional identity terms: a generator fed its own target domain should
    // change nothing
    let (mut identity_a, mut identity_b) = (0.0, 0.0);
    if w.lambda_identity > 0.0 {
        let (id_a, tr_id_a) = g_b2a.forward_cached(real_a)?;
        identity_a = cycle_loss(&id_a, real_a)?;
        let (_, g_id) = g_b2a.backward(
            &tr_id_a,
            &cycle_grad(&id_a, real_a, w.lambda_identity),
            true,
        )?;
        grads_b2a = add_grad_stores(grads_b2a, g_id.unwrap());

        let (id_b, tr_id_b) = g_a2b.forward_cached(real_b)?;
        identity_b = cycle_loss(&id_b, real_b)?;
        let (_, g_id) = g_a2b.backward(
            &tr_id_b,
            &cycle_grad(&id_b, real_b, w.lambda_identity),
            true,
        )?;
        grads_a2b = add_grad_stores(grads_a2b, g_id.unwrap());
    }

    let total = adv_a2b
        + adv_b2a
        + w.lambda_cycle * (cycle_a + cycle_b)
        + w.lambda_identity * (identity_a + identity_b);

    Ok(GeneratorObjective {
        total,
        adv_a2b,
        adv_b2a,
        cycle_a,
        cycle_b,
        identity_a,
        identity_b,
        fake_a,
        fake_b,
        grads_a2b,
        grads_b2a,
    })
}

pub struct DiscriminatorObjective<T: Scalar> {
    pub loss: f64,
    pub grads: GradStore<T>,
}

/// `0.5 * [mse(d(real), 1) + mse(d(fake), 0)]`; the fake is treated as a
/// constant (it comes from the image pool, already detached).
pub fn discriminator_objective<T: Scalar>(
    d: &Network<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<DiscriminatorObjective<T>, LossError> {
    if real.shape() != fake.shape() {
        return Err(LossError::ShapeMismatch {
            a: real.shape().to_vec(),
            b: fake.shape().to_vec(),
        });
    }
    let (scores_real, tr_r) = d.forward_cached(real)?;
    let (scores_fake, tr_f) = d.forward_cached(fake)?;
    let loss = 0.5 * (adversarial_loss(&scores_real, true)? + adversarial_loss(&scores_fake, false)?);
    let (_, grads_real) = d.backward(&tr_r, &adversarial_grad(&scores_real, true, 0.5), true)?;
    let (_, grads_fake) = d.backward(&tr_f, &adversarial_grad(&scores_fake, false, 0.5), true)?;
    Ok(DiscriminatorObjective {
        loss,
        grads: add_grad_stores(grads_real.unwrap(), grads_fake.unwrap()),
    })
}
