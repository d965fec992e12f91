//! Volumetric CycleGAN engine for unpaired 3D image-to-image translation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors and the differentiable primitives
//!   (3D convolution, transpose convolution, instance normalization,
//!   activations, padding), each with an analytically derived backward pass.
//! * [`net`] — the generator / discriminator architectures as declarative
//!   layer specs, plus runtime networks with forward caches and full
//!   backpropagation, receptive-field and parameter-count analysis.
//! * [`loss`], [`optim`], [`pool`] — least-squares adversarial loss, cycle
//!   consistency, Adam, the linear learning-rate decay, and the historical
//!   image pool.
//! * [`nifti`], [`volume`] — NIfTI-1 parsing / writing (plain and gzip),
//!   cropping, and intensity normalization into the generator's tanh range.
//! * [`augment`] — random 3D rotations with trilinear resampling.
//! * [`train`] — the full four-network training loop, checkpointing, metric
//!   logging, and inference-time translation.
//! * [`gradcheck`] — double-precision central finite-difference verification
//!   of every backward pass.
//!
//! All operations are deterministic for a fixed seed: parallel kernels only
//! ever split work across *disjoint* output regions with a fixed per-element
//! accumulation order, so results are bitwise identical no matter how many
//! threads run (see [`exec`]).

pub mod augment;
pub mod exec;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod nifti;
pub mod optim;
pub mod pool;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use tensor::{Dtype, Scalar, Tensor};
