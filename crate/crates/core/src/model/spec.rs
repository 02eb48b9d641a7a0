use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    LeakyRelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// One block of the encoder or decoder. Activations are NHWC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Convolution, activation, then an optional 2×2 stride-2 pool.
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        pool: Option<PoolKind>,
    },
    /// Two 3×3 convolutions with a skip connection (1×1 projection when the
    /// shape changes); leaky-ReLU after the first conv and after the sum.
    Residual { out_channels: usize, stride: usize },
    /// Fully connected; spatial inputs are flattened first.
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
    TransposedConv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    Upsample { factor: usize },
    /// Reshapes each sample to `shape` (`[H, W, C]` or `[D]`).
    Reshape { shape: Vec<usize> },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    #[serde(default)]
    pub taps: bool,
    pub layer: LayerKind,
}

impl LayerSpec {
    pub fn new(index: usize, layer: LayerKind) -> Self {
        Self {
            index,
            taps: false,
            layer,
        }
    }

    pub fn tapped(mut self) -> Self {
        self.taps = true;
        self
    }
}

/// Declarative autoencoder: encoder layers (index 0 nearest the input),
/// decoder layers, the code size and the per-sample input shape `[H, W, C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub input_shape: Vec<usize>,
    pub code_size: usize,
    pub encoder_layers: Vec<LayerSpec>,
    pub decoder_layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    /// Adaptive average pooling to a g×g grid, flattened (`output_dim = C·g²`).
    AvgPool,
    /// 3×3 conv, global average pool, batch norm, dense to `output_dim`.
    ConvPoolNormDense,
    /// Flatten only.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorSpec {
    pub kind: SelectorKind,
    pub output_dim: usize,
}

/// Per-sample shape as it flows through the network: `[H, W, C]` or `[D]`.
pub type SampleShape = Vec<usize>;

pub(crate) fn flat_len(s: &[usize]) -> usize {
    s.iter().product()
}

/// Output shape of one layer given its input shape.
pub(crate) fn infer_layer(layer: &LayerKind, input: &[usize]) -> Result<SampleShape> {
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match input {
            [h, w, c] => Ok((*h, *w, *c)),
            _ => Err(Error::Architecture(format!(
                "{what} needs a spatial [H, W, C] input, got {input:?}"
            ))),
        }
    };
    match layer {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            pool,
            ..
        } => {
            let (h, w, _) = spatial("conv")?;
            if *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                return Err(Error::Architecture(format!(
                    "conv kernel {kernel} stride {stride} does not fit {h}x{w}"
                )));
            }
            let mut oh = (h + 2 * padding - kernel) / stride + 1;
            let mut ow = (w + 2 * padding - kernel) / stride + 1;
            if pool.is_some() {
                if oh < 2 || ow < 2 {
                    return Err(Error::Architecture(format!("cannot pool a {oh}x{ow} map")));
                }
                oh /= 2;
                ow /= 2;
            }
            Ok(vec![oh, ow, *out_channels])
        }
        LayerKind::Residual {
            out_channels,
            stride,
        } => {
            let (h, w, _) = spatial("residual")?;
            if *stride == 0 {
                return Err(Error::Architecture("residual stride must be positive".into()));
            }
            Ok(vec![(h - 1) / stride + 1, (w - 1) / stride + 1, *out_channels])
        }
        LayerKind::Dense { units, .. } => Ok(vec![*units]),
        LayerKind::TransposedConv {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (h, w, _) = spatial("transposed_conv")?;
            let oh = (h - 1) * stride + kernel;
            let ow = (w - 1) * stride + kernel;
            if *stride == 0 || oh <= 2 * padding || ow <= 2 * padding {
                return Err(Error::Architecture("transposed conv output would be empty".into()));
            }
            Ok(vec![oh - 2 * padding, ow - 2 * padding, *out_channels])
        }
        LayerKind::Upsample { factor } => {
            let (h, w, c) = spatial("upsample")?;
            if *factor == 0 {
                return Err(Error::Architecture("upsample factor must be positive".into()));
            }
            Ok(vec![h * factor, w * factor, c])
        }
        LayerKind::Reshape { shape } => {
            if flat_len(shape) != flat_len(input) || shape.iter().any(|&d| d == 0) {
                return Err(Error::Architecture(format!(
                    "cannot reshape {input:?} into {shape:?}"
                )));
            }
            Ok(shape.clone())
        }
    }
}

impl AutoencoderSpec {
    /// Shapes after each encoder layer, keyed by layer index.
    pub fn encoder_shapes(&self) -> Result<Vec<(usize, SampleShape)>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.encoder_layers.len());
        for l in &self.encoder_layers {
            shape = infer_layer(&l.layer, &shape)
                .map_err(|e| Error::Architecture(format!("encoder layer {}: {e}", l.index)))?;
            out.push((l.index, shape.clone()));
        }
        Ok(out)
    }

    pub fn decoder_output_shape(&self) -> Result<SampleShape> {
        let mut shape = vec![self.code_size];
        for l in &self.decoder_layers {
            shape = infer_layer(&l.layer, &shape)
                .map_err(|e| Error::Architecture(format!("decoder layer {}: {e}", l.index)))?;
        }
        Ok(shape)
    }

    pub fn tapped_layers(&self) -> Vec<usize> {
        self.encoder_layers
            .iter()
            .filter(|l| l.taps)
            .map(|l| l.index)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Architecture(format!(
                "input_shape must be [H, W, C] with positive entries, got {:?}",
                self.input_shape
            )));
        }
        if self.code_size == 0 {
            return Err(Error::Architecture("code_size must be positive".into()));
        }
        for (name, layers) in [("encoder", &self.encoder_layers), ("decoder", &self.decoder_layers)] {
            if layers.windows(2).any(|w| w[0].index >= w[1].index) {
                return Err(Error::Architecture(format!(
                    "{name} layer indices must be strictly increasing"
                )));
            }
        }
        let last = self
            .encoder_layers
            .last()
            .ok_or_else(|| Error::Architecture("encoder has no layers".into()))?;
        if !last.taps {
            return Err(Error::Architecture(format!(
                "final encoder layer {} must be tapped",
                last.index
            )));
        }
        let shapes = self.encoder_shapes()?;
        let code = &shapes.last().unwrap().1;
        if code != &vec![self.code_size] {
            return Err(Error::Architecture(format!(
                "encoder output {code:?} does not match code_size {}",
                self.code_size
            )));
        }
        if self.decoder_layers.is_empty() {
            return Err(Error::Architecture("decoder has no layers".into()));
        }
        let out = self.decoder_output_shape()?;
        if out != self.input_shape {
            return Err(Error::Architecture(format!(
                "decoder output {out:?} does not match input shape {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Selectors of one kind on every tapped layer, with natural output sizes.
    pub fn uniform_selectors(&self, kind: SelectorKind) -> Result<BTreeMap<usize, SelectorSpec>> {
        let shapes = self.encoder_shapes()?;
        let mut out = BTreeMap::new();
        for l in self.encoder_layers.iter().filter(|l| l.taps) {
            let shape = &shapes.iter().find(|(i, _)| *i == l.index).unwrap().1;
            let output_dim = match kind {
                SelectorKind::Identity => flat_len(shape),
                SelectorKind::AvgPool | SelectorKind::ConvPoolNormDense => *shape.last().unwrap(),
            };
            out.insert(l.index, SelectorSpec { kind, output_dim });
        }
        Ok(out)
    }

    /// Copy with exactly `layers` tapped (plus the final layer, which always is).
    pub fn with_taps(&self, layers: &[usize]) -> Result<Self> {
        let mut s = self.clone();
        for l in &mut s.encoder_layers {
            l.taps = layers.contains(&l.index);
        }
        if let Some(last) = s.encoder_layers.last_mut() {
            last.taps = true;
        }
        for &j in layers {
            if !s.encoder_layers.iter().any(|l| l.index == j) {
                return Err(Error::Architecture(format!("no encoder layer with index {j}")));
            }
        }
        Ok(s)
    }
}
