use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

impl Activation {
    /// True when the function has a derivative discontinuity at zero.
    pub fn has_kink(&self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 2-D convolution with square kernel.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Transposed (up-)convolution, the adjoint of [`LayerSpec::Conv`].
    ConvTranspose {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Fully connects the spatial positions of each channel with its own
    /// weight matrix; channels never mix.
    ChannelwiseFc,
    /// Fully-connected layer over the flattened input.
    Dense {
        out_features: usize,
    },
    Activation(Activation),
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::ConvTranspose { .. } => "conv_transpose",
            LayerSpec::ChannelwiseFc => "channelwise_fc",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Activation(Activation::Relu) => "relu",
            LayerSpec::Activation(Activation::LeakyRelu { .. }) => "leaky_relu",
            LayerSpec::Activation(Activation::Tanh) => "tanh",
            LayerSpec::Activation(Activation::Sigmoid) => "sigmoid",
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, LayerSpec::Activation(_))
    }

    /// Output shape for the given input shape.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err("conv needs positive kernel, stride and channels".into());
                }
                let ph = input.height + 2 * padding;
                let pw = input.width + 2 * padding;
                if ph < kernel || pw < kernel {
                    return Err(format!("kernel {kernel} larger than padded input {input}"));
                }
                Ok(Shape::new(
                    out_channels,
                    (ph - kernel) / stride + 1,
                    (pw - kernel) / stride + 1,
                ))
            }
            LayerSpec::ConvTranspose {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err("conv_transpose needs positive kernel, stride and channels".into());
                }
                let full_h = (input.height - 1) * stride + kernel;
                let full_w = (input.width - 1) * stride + kernel;
                if full_h <= 2 * padding || full_w <= 2 * padding {
                    return Err(format!("padding {padding} consumes the whole output"));
                }
                Ok(Shape::new(
                    out_channels,
                    full_h - 2 * padding,
                    full_w - 2 * padding,
                ))
            }
            LayerSpec::ChannelwiseFc | LayerSpec::Activation(_) => Ok(input),
            LayerSpec::Dense { out_features } => {
                if out_features == 0 {
                    return Err("dense needs at least one output".into());
                }
                Ok(Shape::flat(out_features))
            }
        }
    }

    /// `(weight, bias)` element counts for the given input shape.
    pub fn param_counts(&self, input: Shape) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => (
                out_channels * input.channels * kernel * kernel,
                out_channels,
            ),
            LayerSpec::ConvTranspose {
                out_channels,
                kernel,
                ..
            } => (
                input.channels * out_channels * kernel * kernel,
                out_channels,
            ),
            LayerSpec::ChannelwiseFc => {
                let hw = input.plane();
                (input.channels * hw * hw, input.channels * hw)
            }
            LayerSpec::Dense { out_features } => (out_features * input.len(), out_features),
            LayerSpec::Activation(_) => (0, 0),
        }
    }

    /// Number of inputs feeding each output, used to scale initialization.
    pub fn fan_in(&self, input: Shape) -> usize {
        match *self {
            LayerSpec::Conv { kernel, .. } => input.channels * kernel * kernel,
            LayerSpec::ConvTranspose { kernel, stride, .. } => {
                (input.channels * kernel * kernel / (stride * stride)).max(1)
            }
            LayerSpec::ChannelwiseFc => input.plane(),
            LayerSpec::Dense { .. } => input.len(),
            LayerSpec::Activation(_) => 0,
        }
    }
}

/// Ordered layer list with a fixed input shape.
///
/// `latent_layer`, when set, names the layer whose output is the latent
/// representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub latent_layer: Option<usize>,
}

impl NetworkSpec {
    /// Input shape followed by every layer's output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input);
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(*shapes.last().unwrap())
                .map_err(|detail| Error::LayerShape { layer: i, detail })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::InvalidSpec("empty input shape".into()));
        }
        self.shapes()?;
        if let Some(l) = self.latent_layer {
            if l >= self.layers.len() {
                return Err(Error::InvalidSpec(format!(
                    "latent layer {l} out of range for {} layers",
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shapes()?.last().unwrap())
    }

    /// Flattened size of the latent layer's output.
    pub fn latent_dim(&self) -> Result<usize> {
        let l = self
            .latent_layer
            .ok_or_else(|| Error::InvalidSpec("network has no latent layer".into()))?;
        Ok(self.shapes()?[l + 1].len())
    }

    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, &s)| {
                let (w, b) = l.param_counts(s);
                w + b
            })
            .sum())
    }

    /// Context encoder for square RGB inputs of side `size`.
    ///
    /// The encoder halves the resolution once per entry of `channels` with
    /// 4x4 stride-2 convolutions. A channel-wise fully-connected layer forms
    /// the bottleneck (its output is the latent), followed by a 1x1
    /// convolution that mixes channels and a mirrored stack of transposed
    /// convolutions back to a 3-channel `tanh` image.
    pub fn context_encoder(size: usize, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidSpec(
                "encoder needs at least one stage".into(),
            ));
        }
        let depth = channels.len() as u32;
        if size == 0 || !size.is_multiple_of(2usize.pow(depth)) {
            return Err(Error::InvalidSpec(format!(
                "input size {size} is not divisible by 2^{depth}"
            )));
        }
        let down = |c| LayerSpec::Conv {
            out_channels: c,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        let up = |c| LayerSpec::ConvTranspose {
            out_channels: c,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        let lrelu = LayerSpec::Activation(Activation::LeakyRelu { slope: 0.2 });
        let relu = LayerSpec::Activation(Activation::Relu);

        let mut layers = Vec::new();
        for &c in channels {
            layers.push(down(c));
            layers.push(lrelu);
        }
        let latent_layer = layers.len();
        layers.push(LayerSpec::ChannelwiseFc);
        layers.push(relu);
        let deepest = *channels.last().unwrap();
        layers.push(LayerSpec::Conv {
            out_channels: deepest,
            kernel: 1,
            stride: 1,
            padding: 0,
        });
        layers.push(relu);
        for &c in channels.iter().rev().skip(1) {
            layers.push(up(c));
            layers.push(relu);
        }
        layers.push(up(3));
        layers.push(LayerSpec::Activation(Activation::Tanh));

        let spec = Self {
            input: Shape::new(3, size, size),
            layers,
            latent_layer: Some(latent_layer),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Binary real/fake classifier for square RGB inputs of side `size`.
    pub fn discriminator(size: usize, channels: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        for &c in channels {
            layers.push(LayerSpec::Conv {
                out_channels: c,
                kernel: 4,
                stride: 2,
                padding: 1,
            });
            layers.push(LayerSpec::Activation(Activation::LeakyRelu { slope: 0.2 }));
        }
        layers.push(LayerSpec::Dense { out_features: 1 });
        layers.push(LayerSpec::Activation(Activation::Sigmoid));
        let spec = Self {
            input: Shape::new(3, size, size),
            layers,
            latent_layer: None,
        };
        spec.validate()?;
        Ok(spec)
    }
}
