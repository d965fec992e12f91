//! Network architectures: declarative layer specs for the generator and
//! discriminator presets, plus shape / parameter / receptive-field analysis
//! and the runtime [`Network`] with forward caches and backpropagation.

mod layer;
mod network;

pub use layer::{ConvTrace, ConvUnit};
pub use network::{GradStore, Network, NetworkTrace};

use thiserror::Error;

use crate::tensor::{Activation, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has {got} channels, network expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial axis {axis} has size {size}, which is not divisible by {divisor}; crop or pad the volume first")]
    IndivisibleAxis {
        axis: usize,
        size: usize,
        divisor: usize,
    },
    #[error("receptive-field recurrence is only defined for plain convolution stacks; layer {layer} is a {kind}")]
    UnsupportedArchitecture { layer: usize, kind: &'static str },
    #[error("residual block at layer {layer} needs matching channel counts, got {input} -> {filters}")]
    ResidualChannelMismatch {
        layer: usize,
        input: usize,
        filters: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    ResidualBlock,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Conv => "3D convolution",
            LayerKind::ConvTranspose => "3D transpose convolution",
            LayerKind::ResidualBlock => "residual (3D convolution)",
        }
    }
}

/// One row of an architecture table.
///
/// Padding is not free-form: stride-1 and stride-2 convolutions use
/// `(kernel - 1) / 2`, which preserves (or exactly halves) spatial size for
/// odd kernels and matches the PatchGAN convention for k=4; transpose
/// convolutions additionally use `output_padding = stride - 1` so stride-2
/// upsampling exactly doubles every axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
    pub normalized: bool,
}

impl LayerSpec {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn output_padding(&self) -> usize {
        match self.kind {
            LayerKind::ConvTranspose => self.stride - 1,
            _ => 0,
        }
    }

    /// Output spatial size along one axis.
    pub fn out_size(&self, n: usize) -> isize {
        let (k, s, p) = (self.kernel as isize, self.stride as isize, self.padding() as isize);
        match self.kind {
            LayerKind::Conv => (n as isize + 2 * p - k).div_euclid(s) + 1,
            LayerKind::ResidualBlock => n as isize,
            LayerKind::ConvTranspose => {
                (n as isize - 1) * s - 2 * p + k + self.output_padding() as isize
            }
        }
    }
}

/// Padding mode applied to the convolutions of a whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetPadding {
    /// Reflect at the borders (generator: avoids border artifacts).
    Reflect,
    /// Zeros at the borders (discriminator).
    Zero,
}

/// Declarative description of a conv stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub padding: NetPadding,
    pub layers: Vec<LayerSpec>,
}

fn conv(filters: usize, kernel: usize, stride: usize, activation: Activation, normalized: bool) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        filters,
        kernel,
        stride,
        activation,
        normalized,
    }
}

impl NetworkSpec {
    /// The 12-row generator: initial k7 conv, two stride-2 downsamplings,
    /// six residual blocks, two stride-2 upsamplings, final k7 conv + tanh.
    /// Instance norm follows every convolution except the output one.
    pub fn generator() -> Self {
        use Activation::*;
        let mut layers = vec![
            conv(32, 7, 1, Relu, true),
            conv(64, 3, 2, Relu, true),
            conv(128, 3, 2, Relu, true),
        ];
        for _ in 0..6 {
            layers.push(LayerSpec {
                kind: LayerKind::ResidualBlock,
                filters: 128,
                kernel: 3,
                stride: 1,
                activation: None,
                normalized: true,
            });
        }
        layers.push(LayerSpec {
            kind: LayerKind::ConvTranspose,
            filters: 64,
            kernel: 3,
            stride: 2,
            activation: Relu,
            normalized: true,
        });
        layers.push(LayerSpec {
            kind: LayerKind::ConvTranspose,
            filters: 32,
            kernel: 3,
            stride: 2,
            activation: Relu,
            normalized: true,
        });
        layers.push(conv(1, 7, 1, Tanh, false));
        NetworkSpec {
            name: "generator".into(),
            input_channels: 1,
            padding: NetPadding::Reflect,
            layers,
        }
    }

    /// The 5-layer PatchGAN discriminator; instance norm on layers 2-4.
    pub fn discriminator() -> Self {
        use Activation::*;
        NetworkSpec {
            name: "discriminator".into(),
            input_channels: 1,
            padding: NetPadding::Zero,
            layers: vec![
                conv(64, 4, 2, LeakyRelu, false),
                conv(128, 4, 2, LeakyRelu, true),
                conv(256, 4, 1, LeakyRelu, true),
                conv(512, 4, 1, LeakyRelu, true),
                conv(1, 4, 1, Sigmoid, false),
            ],
        }
    }

    /// Same topology with every hidden width divided by `divisor` (minimum
    /// 2 so residual blocks stay meaningful); the output layer keeps its
    /// width. Used for finite-difference checks on miniature networks.
    pub fn scaled_down(&self, divisor: usize) -> Self {
        let last = self.layers.len() - 1;
        let mut spec = self.clone();
        for (i, layer) in spec.layers.iter_mut().enumerate() {
            if i != last {
                layer.filters = (layer.filters / divisor).max(2);
            }
        }
        spec.name = format!("{}/{}", self.name, divisor);
        spec
    }

    /// Channel count entering each layer.
    fn input_widths(&self) -> Vec<usize> {
        let mut c = self.input_channels;
        let mut widths = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            widths.push(c);
            c = layer.filters;
        }
        widths
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.filters)
    }

    /// Total learnable parameters: `k^3 * c_in * c_out + c_out` per
    /// convolution plus `2 * c` per normalization.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        for (layer, c_in) in self.layers.iter().zip(self.input_widths()) {
            let k3 = layer.kernel.pow(3);
            let c_out = layer.filters;
            total += match layer.kind {
                LayerKind::Conv | LayerKind::ConvTranspose => {
                    k3 * c_in * c_out + c_out + if layer.normalized { 2 * c_out } else { 0 }
                }
                LayerKind::ResidualBlock => {
                    2 * (k3 * c_out * c_out + c_out)
                        + if layer.normalized { 2 * 2 * c_out } else { 0 }
                }
            };
        }
        total
    }

    /// Receptive field of one output unit via the recurrence
    /// `r <- (r - 1) * stride + kernel`, applied from the last layer back to
    /// the first. Only defined for plain convolution stacks.
    pub fn receptive_field(&self) -> Result<usize, NetError> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind != LayerKind::Conv {
                return Err(NetError::UnsupportedArchitecture {
                    layer: i + 1,
                    kind: layer.kind.label(),
                });
            }
        }
        let mut r = 1usize;
        for layer in self.layers.iter().rev() {
            r = (r - 1) * layer.stride + layer.kernel;
        }
        Ok(r)
    }

    /// Spatial dims every network with a stride-2 transpose stage must
    /// divide evenly; 1 when the net never upsamples.
    pub fn required_divisor(&self) -> usize {
        if self.layers.iter().any(|l| l.kind == LayerKind::ConvTranspose) {
            self.layers
                .iter()
                .filter(|l| l.kind == LayerKind::Conv)
                .map(|l| l.stride)
                .product()
        } else {
            1
        }
    }

    /// Per-layer output shapes for a given input, computed without
    /// allocating any activation storage.
    pub fn shape_trace(&self, spatial: [usize; 3]) -> Result<Vec<([usize; 4], String)>, NetError> {
        let divisor = self.required_divisor();
        for (axis, &n) in spatial.iter().enumerate() {
            if divisor > 1 && n % divisor != 0 {
                return Err(NetError::IndivisibleAxis {
                    axis,
                    size: n,
                    divisor,
                });
            }
        }
        let mut dims = spatial;
        let mut rows = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (axis, d) in dims.iter_mut().enumerate() {
                let out = layer.out_size(*d);
                if out < 1 {
                    return Err(TensorError::EmptyOutput {
                        op: "shape trace",
                        axis,
                        size: out,
                    }
                    .into());
                }
                *d = out as usize;
            }
            rows.push((
                [layer.filters, dims[0], dims[1], dims[2]],
                format!("layer {:02} {}", i + 1, layer.kind.label()),
            ));
        }
        Ok(rows)
    }

    /// Plain-text architecture table (one row per layer) for auditing.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("network: {}\n", self.name));
        out.push_str("layer  kind                        filters  kernel  stride  norm  activation\n");
        for (i, l) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "{:<5}  {:<26}  {:<7}  {:<6}  {:<6}  {:<4}  {}\n",
                i + 1,
                l.kind.label(),
                l.filters,
                l.kernel,
                l.stride,
                if l.normalized { "yes" } else { "no" },
                l.activation.label(),
            ));
        }
        out.push_str(&format!("parameters: {}\n", self.parameter_count()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_preset_matches_published_architecture() {
        let g = NetworkSpec::generator();
        assert_eq!(g.layers.len(), 12);
        let residuals = g
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::ResidualBlock)
            .count();
        assert_eq!(residuals, 6);
        let filters: Vec<usize> = g.layers.iter().map(|l| l.filters).collect();
        assert_eq!(filters, [32, 64, 128, 128, 128, 128, 128, 128, 128, 64, 32, 1]);
        assert_eq!(g.layers[0].kernel, 7);
        assert_eq!(g.layers[11].activation, Activation::Tanh);
        assert_eq!(g.layers[11].kernel, 7);
        let strides: Vec<usize> = g.layers.iter().map(|l| l.stride).collect();
        assert_eq!(strides, [1, 2, 2, 1, 1, 1, 1, 1, 1, 2, 2, 1]);
    }

    #[test]
    fn discriminator_preset_matches_published_architecture() {
        let d = NetworkSpec::discriminator();
        let filters: Vec<usize> = d.layers.iter().map(|l| l.filters).collect();
        assert_eq!(filters, [64, 128, 256, 512, 1]);
        let strides: Vec<usize> = d.layers.iter().map(|l| l.stride).collect();
        assert_eq!(strides, [2, 2, 1, 1, 1]);
        assert!(d.layers.iter().all(|l| l.kernel == 4));
        assert_eq!(d.layers[4].activation, Activation::Sigmoid);
        assert!(d.layers[..4]
            .iter()
            .all(|l| l.activation == Activation::LeakyRelu));
        // norm on layers 2-4 only
        let norm: Vec<bool> = d.layers.iter().map(|l| l.normalized).collect();
        assert_eq!(norm, [false, true, true, true, false]);
    }

    #[test]
    fn first_layer_parameter_count_formula() {
        // 7^3 * 1 * 32 + 32 = 11008 for the raw convolution, plus 64 norm
        // parameters since the generator normalizes its first layer.
        let g = NetworkSpec::generator();
        let first_only = NetworkSpec {
            layers: vec![g.layers[0]],
            ..g.clone()
        };
        assert_eq!(first_only.parameter_count(), 11008 + 64);
        let unnormalized = NetworkSpec {
            layers: vec![LayerSpec {
                normalized: false,
                ..g.layers[0]
            }],
            ..g.clone()
        };
        assert_eq!(unnormalized.parameter_count(), 11008);
    }

    #[test]
    fn discriminator_first_layer_count() {
        let d = NetworkSpec::discriminator();
        let first_only = NetworkSpec {
            layers: vec![d.layers[0]],
            ..d.clone()
        };
        assert_eq!(first_only.parameter_count(), 4 * 4 * 4 * 64 + 64);
    }

    #[test]
    fn empty_spec_has_zero_parameters() {
        let spec = NetworkSpec {
            name: "custom".into(),
            input_channels: 1,
            padding: NetPadding::Zero,
            layers: vec![],
        };
        assert_eq!(spec.parameter_count(), 0);
    }

    #[test]
    fn receptive_field_classic_patchgan_is_70() {
        let spec = NetworkSpec {
            name: "custom".into(),
            input_channels: 1,
            padding: NetPadding::Zero,
            layers: [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]
                .map(|(k, s)| conv(1, k, s, Activation::None, false))
                .to_vec(),
        };
        assert_eq!(spec.receptive_field().unwrap(), 70);
    }

    #[test]
    fn receptive_field_single_layer_is_kernel() {
        let spec = NetworkSpec {
            name: "custom".into(),
            input_channels: 1,
            padding: NetPadding::Zero,
            layers: vec![conv(1, 4, 2, Activation::None, false)],
        };
        assert_eq!(spec.receptive_field().unwrap(), 4);
    }

    #[test]
    fn receptive_field_discriminator_preset_is_46() {
        assert_eq!(NetworkSpec::discriminator().receptive_field().unwrap(), 46);
    }

    #[test]
    fn receptive_field_rejects_residual_layers() {
        let err = NetworkSpec::generator().receptive_field().unwrap_err();
        assert!(matches!(err, NetError::UnsupportedArchitecture { .. }));
    }

    #[test]
    fn generator_shape_trace_preserves_full_size_grid() {
        let g = NetworkSpec::generator();
        let rows = g.shape_trace([152, 180, 120]).unwrap();
        assert_eq!(rows.last().unwrap().0, [1, 152, 180, 120]);
        // bottleneck after two stride-2 downsamplings
        assert_eq!(rows[2].0, [128, 38, 45, 30]);
    }

    #[test]
    fn generator_shape_trace_rejects_indivisible_dims() {
        let g = NetworkSpec::generator();
        let err = g.shape_trace([150, 180, 120]).unwrap_err();
        match err {
            NetError::IndivisibleAxis { axis, size, divisor } => {
                assert_eq!((axis, size, divisor), (0, 150, 4));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn discriminator_shape_trace_follows_per_layer_formula() {
        let d = NetworkSpec::discriminator();
        let rows = d.shape_trace([152, 180, 120]).unwrap();
        let dims: Vec<[usize; 4]> = rows.iter().map(|r| r.0).collect();
        // k4 s2 p1 halves; k4 s1 p1 shrinks by one
        assert_eq!(
            dims,
            vec![
                [64, 76, 90, 60],
                [128, 38, 45, 30],
                [256, 37, 44, 29],
                [512, 36, 43, 28],
                [1, 35, 42, 27],
            ]
        );
    }

    #[test]
    fn rendered_table_lists_every_layer() {
        let table = NetworkSpec::generator().render_table();
        assert_eq!(table.lines().count(), 12 + 3);
        assert!(table.contains("tanh"));
    }
}
