//! Runtime network: parameterized layers realized from a [`NetworkSpec`],
//! with deterministic initialization, cached forward passes and full
//! backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Activation, ConvParams, PadMode, Scalar, Tensor, VolGeom};

use super::layer::{ConvTrace, ConvUnit, ResBlock, ResTrace, UnitGrads};
use super::{LayerKind, NetError, NetPadding, NetworkSpec};

pub const INIT_STDDEV: f64 = 0.02;

#[derive(Clone)]
enum RtLayer<T: Scalar> {
    Unit(ConvUnit<T>),
    Res(ResBlock<T>),
}

enum LayerTrace<T: Scalar> {
    Unit(ConvTrace<T>),
    Res(ResTrace<T>),
}

/// Forward activations retained for one backward pass.
pub struct NetworkTrace<T: Scalar> {
    traces: Vec<LayerTrace<T>>,
}

/// Named parameter gradients in network traversal order.
pub type GradStore<T> = Vec<(String, Tensor<T>)>;

#[derive(Clone)]
pub struct Network<T: Scalar> {
    spec: NetworkSpec,
    layers: Vec<RtLayer<T>>,
    pub rng_seed: u64,
}

fn sample_kernel<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0f64, INIT_STDDEV).expect("valid stddev");
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::from_f64(dist.sample(rng))).collect(),
    )
}

fn build_unit<T: Scalar>(
    c_in: usize,
    layer: &super::LayerSpec,
    pad_mode: PadMode,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> ConvUnit<T> {
    let transpose = layer.kind == LayerKind::ConvTranspose;
    let kernel_shape = if transpose {
        [c_in, layer.filters, layer.kernel, layer.kernel, layer.kernel]
    } else {
        [layer.filters, c_in, layer.kernel, layer.kernel, layer.kernel]
    };
    let mut conv = ConvParams {
        stride: layer.stride,
        padding: layer.padding(),
        padding_mode: pad_mode,
        output_padding: layer.output_padding(),
    };
    if transpose {
        conv.padding_mode = PadMode::Zero;
    }
    ConvUnit {
        kernel: sample_kernel(&kernel_shape, rng),
        bias: Tensor::zeros(&[layer.filters]),
        norm: layer
            .normalized
            .then(|| (Tensor::filled(&[layer.filters], T::one()), Tensor::zeros(&[layer.filters]))),
        conv,
        transpose,
        activation,
    }
}

impl<T: Scalar> Network<T> {
    /// Realize a spec with kernels ~ Normal(0, 0.02), zero biases, unit
    /// gammas and zero betas; bitwise deterministic for a fixed seed.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad_mode = match spec.padding {
            NetPadding::Reflect => PadMode::Reflect,
            NetPadding::Zero => PadMode::Zero,
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut c_in = spec.input_channels;
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Conv | LayerKind::ConvTranspose => {
                    layers.push(RtLayer::Unit(build_unit(
                        c_in,
                        layer,
                        pad_mode,
                        layer.activation,
                        &mut rng,
                    )));
                }
                LayerKind::ResidualBlock => {
                    if layer.filters != c_in {
                        return Err(NetError::ResidualChannelMismatch {
                            layer: i + 1,
                            input: c_in,
                            filters: layer.filters,
                        });
                    }
                    // conv-norm-ReLU then conv-norm; the block's spec-level
                    // activation ("None") applies after the skip addition.
                    let conv1 = build_unit(c_in, layer, pad_mode, Activation::Relu, &mut rng);
                    let conv2 = build_unit(c_in, layer, pad_mode, Activation::None, &mut rng);
                    layers.push(RtLayer::Res(ResBlock { conv1, conv2 }));
                }
            }
            c_in = layer.filters;
        }
        Ok(Network {
            spec,
            layers,
            rng_seed: seed,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), NetError> {
        let g = VolGeom::of(input)?;
        if g.channels != self.spec.input_channels {
            return Err(NetError::ChannelMismatch {
                expected: self.spec.input_channels,
                got: g.channels,
            });
        }
        let divisor = self.spec.required_divisor();
        if divisor > 1 {
            for (axis, n) in g.spatial().into_iter().enumerate() {
                if n % divisor != 0 {
                    return Err(NetError::IndivisibleAxis {
                        axis,
                        size: n,
                        divisor,
                    });
                }
            }
        }
        Ok(())
    }

    /// Forward pass without caches (inference).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                RtLayer::Unit(u) => u.forward(&x)?,
                RtLayer::Res(r) => r.forward(&x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass retaining per-layer activations so [`Self::backward`]
    /// can run.
    pub fn forward_cached(&self, input: &Tensor<T>) -> Result<(Tensor<T>, NetworkTrace<T>), NetError> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                RtLayer::Unit(u) => {
                    let (y, t) = u.forward_traced(x)?;
                    traces.push(LayerTrace::Unit(t));
                    x = y;
                }
                RtLayer::Res(r) => {
                    let (y, t) = r.forward_traced(x)?;
                    traces.push(LayerTrace::Res(t));
                    x = y;
                }
            }
        }
        Ok((x, NetworkTrace { traces }))
    }

    /// Backpropagate `grad_out` through a cached forward pass. Returns the
    /// gradient w.r.t. the network input and, when `want_params` is set, the
    /// parameter gradients in traversal order.
    pub fn backward(
        &self,
        trace: &NetworkTrace<T>,
        grad_out: &Tensor<T>,
        want_params: bool,
    ) -> Result<(Tensor<T>, Option<GradStore<T>>), NetError> {
        assert_eq!(trace.traces.len(), self.layers.len(), "trace/layer mismatch");
        let mut grad = grad_out.clone();
        let mut collected: Vec<Vec<(String, Tensor<T>)>> = Vec::new();
        for (i, (layer, t)) in self.layers.iter().zip(&trace.traces).enumerate().rev() {
            match (layer, t) {
                (RtLayer::Unit(u), LayerTrace::Unit(tr)) => {
                    let (g_in, grads) = u.backward(tr, &grad, want_params)?;
                    if let Some(g) = grads {
                        collected.push(named_unit_grads(&layer_prefix(i), g));
                    }
                    grad = g_in;
                }
                (RtLayer::Res(r), LayerTrace::Res(tr)) => {
                    let (g_in, grads) = r.backward(tr, &grad, want_params)?;
                    if let Some((g1, g2)) = grads {
                        let prefix = layer_prefix(i);
                        let mut group = named_unit_grads(&format!("{prefix}.conv1"), g1);
                        group.extend(named_unit_grads(&format!("{prefix}.conv2"), g2));
                        collected.push(group);
                    }
                    grad = g_in;
                }
                _ => unreachable!("trace kind always matches layer kind"),
            }
        }
        let store = want_params.then(|| {
            collected.reverse();
            collected.into_iter().flatten().collect()
        });
        Ok((grad, store))
    }

    /// Visit parameters in the fixed traversal order (layer order; within a
    /// unit kernel, bias, gamma, beta).
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = layer_prefix(i);
            match layer {
                RtLayer::Unit(u) => visit_unit(&prefix, u, &mut f),
                RtLayer::Res(r) => {
                    visit_unit(&format!("{prefix}.conv1"), &r.conv1, &mut f);
                    visit_unit(&format!("{prefix}.conv2"), &r.conv2, &mut f);
                }
            }
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = layer_prefix(i);
            match layer {
                RtLayer::Unit(u) => visit_unit_mut(&prefix, u, &mut f),
                RtLayer::Res(r) => {
                    visit_unit_mut(&format!("{prefix}.conv1"), &mut r.conv1, &mut f);
                    visit_unit_mut(&format!("{prefix}.conv2"), &mut r.conv2, &mut f);
                }
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(|name, _| names.push(name.to_string()));
        names
    }

    /// Total number of learnable scalars; equals the spec-level count.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    /// FNV-1a over the little-endian parameter bytes, for cheap
    /// "did anything change" assertions.
    pub fn params_fingerprint(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut buf = Vec::new();
        self.for_each_param(|_, t| {
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            for &b in &buf {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x1000_0000_01b3);
            }
        });
        hash
    }
}

fn layer_prefix(i: usize) -> String {
    format!("layer{:02}", i + 1)
}

fn visit_unit<'a, T: Scalar>(
    prefix: &str,
    u: &'a ConvUnit<T>,
    f: &mut impl FnMut(&str, &'a Tensor<T>),
) {
    f(&format!("{prefix}.kernel"), &u.kernel);
    f(&format!("{prefix}.bias"), &u.bias);
    if let Some((gamma, beta)) = &u.norm {
        f(&format!("{prefix}.gamma"), gamma);
        f(&format!("{prefix}.beta"), beta);
    }
}

fn visit_unit_mut<T: Scalar>(
    prefix: &str,
    u: &mut ConvUnit<T>,
    f: &mut impl FnMut(&str, &mut Tensor<T>),
) {
    f(&format!("{prefix}.kernel"), &mut u.kernel);
    f(&format!("{prefix}.bias"), &mut u.bias);
    if let Some((gamma, beta)) = &mut u.norm {
        f(&format!("{prefix}.gamma"), gamma);
        f(&format!("{prefix}.beta"), beta);
    }
}

fn named_unit_grads<T: Scalar>(prefix: &str, g: UnitGrads<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = vec![
        (format!("{prefix}.kernel"), g.kernel),
        (format!("{prefix}.bias"), g.bias),
    ];
    if let (Some(gamma), Some(beta)) = (g.gamma, g.beta) {
        out.push((format!("{prefix}.gamma"), gamma));
        out.push((format!("{prefix}.beta"), beta));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let a = Network::<f32>::init(NetworkSpec::discriminator(), 42).unwrap();
        let b = Network::<f32>::init(NetworkSpec::discriminator(), 42).unwrap();
        assert_eq!(a.params_fingerprint(), b.params_fingerprint());
        let c = Network::<f32>::init(NetworkSpec::discriminator(), 43).unwrap();
        assert_ne!(a.params_fingerprint(), c.params_fingerprint());
    }

    #[test]
    fn init_statistics_match_declared_distribution() {
        // 4^3 * 64 * 128 > 1e5 samples in discriminator layer 2
        let net = Network::<f64>::init(NetworkSpec::discriminator(), 7).unwrap();
        let mut checked = false;
        net.for_each_param(|name, t| {
            if name == "layer02.kernel" {
                let n = t.numel() as f64;
                assert!(n >= 1e5);
                let mean: f64 = t.data().iter().sum::<f64>() / n;
                let var: f64 = t.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-3, "kernel mean {mean}");
                assert!((var.sqrt() - INIT_STDDEV).abs() < 1e-3, "stddev {}", var.sqrt());
                checked = true;
            }
        });
        assert!(checked);
    }

    #[test]
    fn biases_zero_gammas_one() {
        let net = Network::<f32>::init(NetworkSpec::generator(), 0).unwrap();
        net.for_each_param(|name, t| {
            if name.ends_with("bias") || name.ends_with("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name} not one");
            }
        });
    }

    #[test]
    fn runtime_parameter_count_matches_spec_formula() {
        for spec in [NetworkSpec::generator(), NetworkSpec::discriminator()] {
            let expected = spec.parameter_count();
            let net = Network::<f32>::init(spec, 1).unwrap();
            assert_eq!(net.parameter_count(), expected);
        }
    }

    #[test]
    fn generator_preserves_shape_and_tanh_range() {
        let spec = NetworkSpec::generator().scaled_down(8);
        let net = Network::<f32>::init(spec, 3).unwrap();
        let input = Tensor::filled(&[1, 8, 12, 8], 0.3f32);
        let out = net.forward(&input).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn generator_on_zero_input_is_constant() {
        // Reflect padding of a constant field is constant, so every layer
        // output is spatially constant and the final tanh(bias)=0 everywhere.
        let spec = NetworkSpec::generator().scaled_down(8);
        let net = Network::<f32>::init(spec, 9).unwrap();
        let out = net.forward(&Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| v == first));
        assert_eq!(first, 0.0);
    }

    #[test]
    fn discriminator_scores_stay_in_unit_interval() {
        let spec = NetworkSpec::discriminator().scaled_down(8);
        let net = Network::<f32>::init(spec, 5).unwrap();
        let out = net.forward(&Tensor::zeros(&[1, 16, 16, 16])).unwrap();
        assert_eq!(out.shape()[0], 1);
        assert!(out.all_finite());
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_channels_and_indivisible_dims() {
        let net = Network::<f32>::init(NetworkSpec::generator().scaled_down(8), 1).unwrap();
        let bad_channels = Tensor::zeros(&[2, 8, 8, 8]);
        assert!(matches!(
            net.forward(&bad_channels),
            Err(NetError::ChannelMismatch { .. })
        ));
        let bad_dims = Tensor::zeros(&[1, 10, 8, 8]);
        match net.forward(&bad_dims) {
            Err(NetError::IndivisibleAxis { axis, size, divisor }) => {
                assert_eq!((axis, size, divisor), (0, 10, 4));
            }
            other => panic!("expected axis error, got {other:?}"),
        }
    }

    #[test]
    fn grad_store_names_align_with_param_traversal() {
        let spec = NetworkSpec::generator().scaled_down(16);
        let net = Network::<f64>::init(spec, 2).unwrap();
        let x = Tensor::filled(&[1, 8, 8, 8], 0.1f64);
        let (y, trace) = net.forward_cached(&x).unwrap();
        let ones = Tensor::filled(y.shape(), 1.0);
        let (_, grads) = net.backward(&trace, &ones, true).unwrap();
        let grads = grads.unwrap();
        let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, net.param_names());
        // gradient shapes mirror parameter shapes
        let mut i = 0;
        net.for_each_param(|name, p| {
            assert_eq!(grads[i].0, name);
            assert_eq!(grads[i].1.shape(), p.shape());
            i += 1;
        });
    }
}
