//! Shipped architectures. Only block counts are fixed by the method; the
//! widths, kernels and strides below are this crate's choices.

use serde::{Deserialize, Serialize};

use super::spec::{Activation, AutoencoderSpec, LayerKind, LayerSpec, PoolKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    LenetLike,
    ResidualLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetParams {
    /// Channels of the first block; later blocks double it.
    pub base_width: usize,
    pub code_size: usize,
    /// Convolution kernel of the LeNet-like blocks.
    pub kernel: usize,
    /// Residual blocks of the residual-like preset.
    pub residual_blocks: usize,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self {
            base_width: 32,
            code_size: 128,
            kernel: 5,
            residual_blocks: 4,
        }
    }
}

impl Preset {
    pub fn build(self, input_shape: &[usize], p: &PresetParams) -> Result<AutoencoderSpec> {
        match self {
            Preset::LenetLike => lenet_like(input_shape, p),
            Preset::ResidualLike => residual_like(input_shape, p),
        }
    }
}

fn hwc(input_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match input_shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::Architecture(format!(
            "input shape must be [H, W, C], got {input_shape:?}"
        ))),
    }
}

fn decoder_tail(
    mut idx: usize,
    from: (usize, usize, usize),
    widths: &[usize],
    out_channels: usize,
    out_activation: Activation,
) -> Vec<LayerSpec> {
    let (h, w, c) = from;
    let mut layers = vec![
        LayerSpec::new(
            idx,
            LayerKind::Dense {
                units: h * w * c,
                activation: Activation::LeakyRelu,
            },
        ),
        LayerSpec::new(idx + 1, LayerKind::Reshape { shape: vec![h, w, c] }),
    ];
    idx += 2;
    for &width in widths {
        layers.push(LayerSpec::new(
            idx,
            LayerKind::TransposedConv {
                out_channels: width,
                kernel: 2,
                stride: 2,
                padding: 0,
                activation: Activation::LeakyRelu,
            },
        ));
        idx += 1;
    }
    layers.push(LayerSpec::new(
        idx,
        LayerKind::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            activation: out_activation,
            pool: None,
        },
    ));
    layers
}

/// Three conv blocks (conv, leaky-ReLU, 2×2 max-pool) and one dense code layer.
/// Every layer is tapped. Sigmoid output for `[0, 1]` inputs.
pub fn lenet_like(input_shape: &[usize], p: &PresetParams) -> Result<AutoencoderSpec> {
    let (h, w, c) = hwc(input_shape)?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Architecture(format!(
            "lenet_like needs H and W divisible by 8, got {h}x{w}"
        )));
    }
    let widths = [p.base_width, p.base_width * 2, p.base_width * 4];
    let mut encoder: Vec<LayerSpec> = widths
        .iter()
        .enumerate()
        .map(|(i, &oc)| {
            LayerSpec::new(
                i,
                LayerKind::Conv {
                    out_channels: oc,
                    kernel: p.kernel,
                    stride: 1,
                    padding: p.kernel / 2,
                    activation: Activation::LeakyRelu,
                    pool: Some(PoolKind::Max),
                },
            )
            .tapped()
        })
        .collect();
    encoder.push(
        LayerSpec::new(
            3,
            LayerKind::Dense {
                units: p.code_size,
                activation: Activation::None,
            },
        )
        .tapped(),
    );
    let decoder = decoder_tail(
        0,
        (h / 8, w / 8, widths[2]),
        &[widths[1], widths[0], widths[0]],
        c,
        Activation::Sigmoid,
    );
    let spec = AutoencoderSpec {
        input_shape: input_shape.to_vec(),
        code_size: p.code_size,
        encoder_layers: encoder,
        decoder_layers: decoder,
    };
    spec.validate()?;
    Ok(spec)
}

/// Stem conv with max-pool, `residual_blocks` residual blocks (the first at
/// stride 1, the rest at stride 2) and two dense layers. Layer indices run
/// `0..=residual_blocks + 2`; identity output for `[-1, 1]` inputs.
pub fn residual_like(input_shape: &[usize], p: &PresetParams) -> Result<AutoencoderSpec> {
    let (h, w, c) = hwc(input_shape)?;
    let n = p.residual_blocks.max(1);
    let down = 1usize << n; // stem pool + (n - 1) strided blocks
    if h % down != 0 || w % down != 0 {
        return Err(Error::Architecture(format!(
            "residual_like with {n} blocks needs H and W divisible by {down}, got {h}x{w}"
        )));
    }
    let mut encoder = vec![LayerSpec::new(
        0,
        LayerKind::Conv {
            out_channels: p.base_width,
            kernel: 3,
            stride: 1,
            padding: 1,
            activation: Activation::LeakyRelu,
            pool: Some(PoolKind::Max),
        },
    )
    .tapped()];
    let mut width = p.base_width;
    let mut widths = Vec::new();
    for b in 0..n {
        let stride = if b == 0 { 1 } else { 2 };
        if b > 0 {
            widths.push(width);
            width *= 2;
        }
        encoder.push(
            LayerSpec::new(
                b + 1,
                LayerKind::Residual {
                    out_channels: width,
                    stride,
                },
            )
            .tapped(),
        );
    }
    encoder.push(
        LayerSpec::new(
            n + 1,
            LayerKind::Dense {
                units: 2 * p.code_size,
                activation: Activation::LeakyRelu,
            },
        )
        .tapped(),
    );
    encoder.push(
        LayerSpec::new(
            n + 2,
            LayerKind::Dense {
                units: p.code_size,
                activation: Activation::None,
            },
        )
        .tapped(),
    );
    widths.reverse();
    widths.push(p.base_width);
    let decoder = decoder_tail(
        0,
        (h / down, w / down, width),
        &widths,
        c,
        Activation::None,
    );
    let spec = AutoencoderSpec {
        input_shape: input_shape.to_vec(),
        code_size: p.code_size,
        encoder_layers: encoder,
        decoder_layers: decoder,
    };
    spec.validate()?;
    Ok(spec)
}
