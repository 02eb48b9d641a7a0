//! Autoencoder construction and the layer-wise forward pass.
//!
//! The encoder is a sequence of blocks; every tapped block's output is
//! routed through its selector to a flat feature vector. Parameters are
//! stored flat in the order encoder, selectors, decoder, so the one-class
//! stage can update the prefix `..decoder_start()` alone.

mod presets;
mod spec;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use presets::{lenet_like, residual_like, Preset, PresetParams};
pub use spec::{
    Activation, AutoencoderSpec, LayerKind, LayerSpec, PoolKind, SampleShape, SelectorKind,
    SelectorSpec,
};

use crate::diffcore::{BatchStats, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Momentum of the selector batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Whether selector batch norms use batch statistics (and record them) or
/// their frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Non-trainable state saved alongside parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Selector output for one tapped layer of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TapOutput {
    pub layer_index: usize,
    pub feature: Tensor,
}

#[derive(Clone, Debug)]
enum LayerParams {
    None,
    Affine {
        w: usize,
        b: usize,
    },
    Residual {
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
        proj: Option<(usize, usize)>,
    },
}

#[derive(Clone, Debug)]
struct CompiledLayer {
    spec: LayerSpec,
    params: LayerParams,
}

#[derive(Clone, Debug)]
enum SelectorPlan {
    AvgPool {
        grid: usize,
    },
    Identity,
    ConvPoolNormDense {
        kernel: usize,
        conv: (usize, usize),
        gamma: usize,
        beta: usize,
        dense: (usize, usize),
        running_mean: usize,
        running_var: usize,
    },
}

/// Variables produced by one encoder pass.
pub struct EncoderPass {
    /// Selector outputs `[N, D]` in ascending layer order.
    pub taps: Vec<(usize, Var)>,
    /// Final encoder output `[N, code_size]`.
    pub code: Var,
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: AutoencoderSpec,
    selectors: BTreeMap<usize, SelectorSpec>,
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    encoder: Vec<CompiledLayer>,
    selector_plans: BTreeMap<usize, SelectorPlan>,
    decoder: Vec<CompiledLayer>,
    encoder_end: usize,
    decoder_start: usize,
    has_decoder: bool,
}

struct ParamBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Parameter>,
}

impl ParamBuilder<'_> {
    /// Uniform in ±1/√fan_in.
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(name, Tensor::from_parts(shape.to_vec(), data))
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) -> usize {
        self.push(name, Tensor::full(shape, v))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }

    fn affine(&mut self, prefix: &str, wshape: &[usize], fan_in: usize) -> (usize, usize) {
        let cout = *wshape.last().unwrap();
        let w = self.uniform(format!("{prefix}.w"), wshape, fan_in);
        let b = self.uniform(format!("{prefix}.b"), &[cout], fan_in);
        (w, b)
    }
}

fn compile_layer(
    prefix: &str,
    l: &LayerSpec,
    input: &[usize],
    pb: &mut ParamBuilder<'_>,
) -> LayerParams {
    let cin = *input.last().unwrap();
    let pre = format!("{prefix}.{}", l.index);
    match &l.layer {
        LayerKind::Conv {
            out_channels,
            kernel,
            ..
        }
        | LayerKind::TransposedConv {
            out_channels,
            kernel,
            ..
        } => {
            let (w, b) = pb.affine(&pre, &[*kernel, *kernel, cin, *out_channels], kernel * kernel * cin);
            LayerParams::Affine { w, b }
        }
        LayerKind::Dense { units, .. } => {
            let din = spec::flat_len(input);
            let (w, b) = pb.affine(&pre, &[din, *units], din);
            LayerParams::Affine { w, b }
        }
        LayerKind::Residual {
            out_channels,
            stride,
        } => {
            let co = *out_channels;
            let (w1, b1) = pb.affine(&format!("{pre}.conv1"), &[3, 3, cin, co], 9 * cin);
            let (w2, b2) = pb.affine(&format!("{pre}.conv2"), &[3, 3, co, co], 9 * co);
            let proj = (*stride != 1 || cin != co)
                .then(|| pb.affine(&format!("{pre}.proj"), &[1, 1, cin, co], cin));
            LayerParams::Residual {
                w1,
                b1,
                w2,
                b2,
                proj,
            }
        }
        LayerKind::Upsample { .. } | LayerKind::Reshape { .. } => LayerParams::None,
    }
}

fn activate(tape: &mut Tape, x: Var, a: Activation) -> Var {
    match a {
        Activation::None => x,
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu => tape.leaky_relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// Builds an autoencoder with parameters drawn deterministically from `seed`.
pub fn build_autoencoder(
    spec: &AutoencoderSpec,
    selectors: &BTreeMap<usize, SelectorSpec>,
    seed: u64,
) -> Result<Model> {
    spec.validate()?;
    let shapes = spec.encoder_shapes()?;
    let tapped = spec.tapped_layers();
    for j in &tapped {
        if !selectors.contains_key(j) {
            return Err(Error::Architecture(format!("tapped layer {j} has no selector")));
        }
    }
    if let Some(j) = selectors.keys().find(|j| !tapped.contains(j)) {
        return Err(Error::Architecture(format!("selector given for untapped layer {j}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder {
        rng: &mut rng,
        params: Vec::new(),
    };

    let mut encoder = Vec::new();
    let mut input = spec.input_shape.clone();
    for (l, (_, out)) in spec.encoder_layers.iter().zip(&shapes) {
        let params = compile_layer("enc", l, &input, &mut pb);
        encoder.push(CompiledLayer {
            spec: l.clone(),
            params,
        });
        input = out.clone();
    }
    let encoder_end = pb.params.len();

    let mut buffers = Vec::new();
    let mut selector_plans = BTreeMap::new();
    for (&j, sel) in selectors {
        let shape = &shapes.iter().find(|(i, _)| *i == j).unwrap().1;
        let (h, w, c) = match shape.as_slice() {
            [h, w, c] => (*h, *w, *c),
            [d] => (1, 1, *d),
            _ => unreachable!(),
        };
        if sel.output_dim == 0 {
            return Err(Error::Architecture(format!("selector {j}: output_dim must be positive")));
        }
        let plan = match sel.kind {
            SelectorKind::Identity => {
                if sel.output_dim != h * w * c {
                    return Err(Error::Architecture(format!(
                        "identity selector on layer {j}: output_dim {} != {}",
                        sel.output_dim,
                        h * w * c
                    )));
                }
                SelectorPlan::Identity
            }
            SelectorKind::AvgPool => {
                let cells = sel.output_dim / c;
                let grid = (cells as f64).sqrt().round() as usize;
                if sel.output_dim % c != 0 || grid * grid != cells || h % grid != 0 || w % grid != 0 {
                    return Err(Error::Architecture(format!(
                        "avg_pool selector on layer {j}: output_dim {} is not C·g² for C = {c} and a grid dividing {h}x{w}",
                        sel.output_dim
                    )));
                }
                SelectorPlan::AvgPool { grid }
            }
            SelectorKind::ConvPoolNormDense => {
                let kernel = if h == 1 && w == 1 { 1 } else { 3 };
                let pre = format!("sel.{j}");
                let conv = pb.affine(&format!("{pre}.conv"), &[kernel, kernel, c, c], kernel * kernel * c);
                let gamma = pb.constant(format!("{pre}.bn.gamma"), &[c], 1.0);
                let beta = pb.constant(format!("{pre}.bn.beta"), &[c], 0.0);
                let dense = pb.affine(&format!("{pre}.dense"), &[c, sel.output_dim], c);
                buffers.push(Buffer {
                    name: format!("{pre}.bn.running_mean"),
                    value: Tensor::zeros(&[c]),
                });
                buffers.push(Buffer {
                    name: format!("{pre}.bn.running_var"),
                    value: Tensor::full(&[c], 1.0),
                });
                SelectorPlan::ConvPoolNormDense {
                    kernel,
                    conv,
                    gamma,
                    beta,
                    dense,
                    running_mean: buffers.len() - 2,
                    running_var: buffers.len() - 1,
                }
            }
        };
        selector_plans.insert(j, plan);
    }
    let decoder_start = pb.params.len();

    let mut decoder = Vec::new();
    let mut input = vec![spec.code_size];
    for l in &spec.decoder_layers {
        let params = compile_layer("dec", l, &input, &mut pb);
        input = spec::infer_layer(&l.layer, &input)?;
        decoder.push(CompiledLayer {
            spec: l.clone(),
            params,
        });
    }

    Ok(Model {
        spec: spec.clone(),
        selectors: selectors.clone(),
        params: pb.params,
        buffers,
        encoder,
        selector_plans,
        decoder,
        encoder_end,
        decoder_start,
        has_decoder: true,
    })
}

impl Model {
    pub fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    pub fn selectors(&self) -> &BTreeMap<usize, SelectorSpec> {
        &self.selectors
    }

    pub fn tapped_layers(&self) -> Vec<usize> {
        self.selectors.keys().copied().collect()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Encoder and selector parameters (everything the one-class stage trains).
    pub fn encoder_params(&self) -> Range<usize> {
        0..self.decoder_start
    }

    pub fn encoder_backbone_params(&self) -> Range<usize> {
        0..self.encoder_end
    }

    pub fn decoder_params(&self) -> Range<usize> {
        self.decoder_start..self.params.len()
    }

    pub fn has_decoder(&self) -> bool {
        self.has_decoder
    }

    /// Drops the decoder and its parameters; the encoder is unaffected.
    pub fn strip_decoder(&mut self) {
        self.params.truncate(self.decoder_start);
        self.decoder.clear();
        self.has_decoder = false;
    }

    fn check_batch(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(
                op,
                format!(
                    "batch {shape:?} does not match [N, {:?}]",
                    self.spec.input_shape
                ),
            ));
        }
        Ok(())
    }

    fn p(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(id, &self.params[id])
    }

    fn layer_forward(&self, tape: &mut Tape, layer: &CompiledLayer, mut x: Var) -> Result<Var> {
        match (&layer.spec.layer, &layer.params) {
            (
                LayerKind::Conv {
                    stride,
                    padding,
                    activation,
                    pool,
                    ..
                },
                LayerParams::Affine { w, b },
            ) => {
                let (w, b) = (self.p(tape, *w), self.p(tape, *b));
                let y = tape.conv2d(x, w, Some(b), *stride, *padding)?;
                let y = activate(tape, y, *activation);
                match pool {
                    Some(PoolKind::Max) => tape.max_pool2d(y, (2, 2), 2),
                    Some(PoolKind::Avg) => tape.avg_pool2d(y, (2, 2), 2),
                    None => Ok(y),
                }
            }
            (
                LayerKind::TransposedConv {
                    stride,
                    padding,
                    activation,
                    ..
                },
                LayerParams::Affine { w, b },
            ) => {
                let (w, b) = (self.p(tape, *w), self.p(tape, *b));
                let y = tape.transposed_conv2d(x, w, Some(b), *stride, *padding)?;
                Ok(activate(tape, y, *activation))
            }
            (LayerKind::Dense { activation, .. }, LayerParams::Affine { w, b }) => {
                if tape.value(x).shape().len() != 2 {
                    x = tape.flatten(x)?;
                }
                let (w, b) = (self.p(tape, *w), self.p(tape, *b));
                let y = tape.dense(x, w, Some(b))?;
                Ok(activate(tape, y, *activation))
            }
            (
                LayerKind::Residual { stride, .. },
                LayerParams::Residual {
                    w1,
                    b1,
                    w2,
                    b2,
                    proj,
                },
            ) => {
                let (w1, b1) = (self.p(tape, *w1), self.p(tape, *b1));
                let h = tape.conv2d(x, w1, Some(b1), *stride, 1)?;
                let h = tape.leaky_relu(h);
                let (w2, b2) = (self.p(tape, *w2), self.p(tape, *b2));
                let h = tape.conv2d(h, w2, Some(b2), 1, 1)?;
                let skip = match proj {
                    Some((pw, pb)) => {
                        let (pw, pb) = (self.p(tape, *pw), self.p(tape, *pb));
                        tape.conv2d(x, pw, Some(pb), *stride, 0)?
                    }
                    None => x,
                };
                let y = tape.add(h, skip)?;
                Ok(tape.leaky_relu(y))
            }
            (LayerKind::Upsample { factor }, _) => tape.upsample(x, *factor),
            (LayerKind::Reshape { shape }, _) => {
                let n = tape.value(x).shape()[0];
                let mut full = vec![n];
                full.extend_from_slice(shape);
                tape.reshape(x, &full)
            }
            _ => unreachable!("layer compiled with mismatched parameters"),
        }
    }

    fn selector_forward(
        &self,
        tape: &mut Tape,
        j: usize,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let mut x = x;
        if tape.value(x).shape().len() == 2 {
            let s = tape.value(x).shape().to_vec();
            x = tape.reshape(x, &[s[0], 1, 1, s[1]])?;
        }
        match &self.selector_plans[&j] {
            SelectorPlan::Identity => tape.flatten(x),
            SelectorPlan::AvgPool { grid } => {
                let y = tape.adaptive_avg_pool2d(x, (*grid, *grid))?;
                tape.flatten(y)
            }
            SelectorPlan::ConvPoolNormDense {
                kernel,
                conv,
                gamma,
                beta,
                dense,
                running_mean,
                running_var,
            } => {
                let (cw, cb) = (self.p(tape, conv.0), self.p(tape, conv.1));
                let y = tape.conv2d(x, cw, Some(cb), 1, kernel / 2)?;
                let y = tape.leaky_relu(y);
                let y = tape.adaptive_avg_pool2d(y, (1, 1))?;
                let y = tape.flatten(y)?;
                let (g, b) = (self.p(tape, *gamma), self.p(tape, *beta));
                let y = match mode {
                    Mode::Train => {
                        let (y, s) = tape.batch_norm_train(y, g, b, BN_EPS)?;
                        stats.push((j, s));
                        y
                    }
                    Mode::Eval => tape.batch_norm_eval(
                        y,
                        g,
                        b,
                        self.buffers[*running_mean].value.data(),
                        self.buffers[*running_var].value.data(),
                        BN_EPS,
                    )?,
                };
                let (dw, db) = (self.p(tape, dense.0), self.p(tape, dense.1));
                tape.dense(y, dw, Some(db))
            }
        }
    }

    /// Runs the encoder on `x` (`[N, H, W, C]`) and every selector.
    pub fn encode(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<EncoderPass> {
        self.check_batch("encode", tape.value(x).shape())?;
        let mut taps = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = x;
        for layer in &self.encoder {
            h = self.layer_forward(tape, layer, h)?;
            if layer.spec.taps {
                let f = self.selector_forward(tape, layer.spec.index, h, mode, &mut batch_stats)?;
                taps.push((layer.spec.index, f));
            }
        }
        Ok(EncoderPass {
            taps,
            code: h,
            batch_stats,
        })
    }

    pub fn decode(&self, tape: &mut Tape, code: Var) -> Result<Var> {
        if !self.has_decoder {
            return Err(Error::invalid("model has no decoder"));
        }
        let mut h = code;
        for layer in &self.decoder {
            h = self.layer_forward(tape, layer, h)?;
        }
        Ok(h)
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (j, s) in stats {
            if let Some(SelectorPlan::ConvPoolNormDense {
                running_mean,
                running_var,
                ..
            }) = self.selector_plans.get(j)
            {
                let (rm, rv) = (*running_mean, *running_var);
                for (r, &m) in self.buffers[rm].value.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, &v) in self.buffers[rv].value.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Inference-mode selector features `[N, D]` per tapped layer.
    pub fn tap_features(&self, batch: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.encode(&mut tape, x, Mode::Eval)?;
        Ok(pass
            .taps
            .into_iter()
            .map(|(j, v)| (j, tape.value(v).clone()))
            .collect())
    }

    /// Per-sample selector outputs, one [`TapOutput`] per tapped layer in
    /// ascending layer order.
    pub fn encode_with_taps(&self, batch: &Tensor) -> Result<Vec<Vec<TapOutput>>> {
        let feats = self.tap_features(batch)?;
        let n = batch.shape()[0];
        let mut out = vec![Vec::with_capacity(feats.len()); n];
        for (&j, t) in &feats {
            for (i, row) in t.unstack().into_iter().enumerate() {
                let d = row.numel();
                out[i].push(TapOutput {
                    layer_index: j,
                    feature: row.reshape(&[d])?,
                });
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.encode(&mut tape, x, Mode::Eval)?;
        let y = self.decode(&mut tape, pass.code)?;
        Ok(tape.value(y).clone())
    }

    /// Replaces parameter and buffer values by name; every name must match.
    pub fn load_state(&mut self, params: Vec<(String, Tensor)>, buffers: Vec<(String, Tensor)>) -> Result<()> {
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters and {} buffers, got {} and {}",
                self.params.len(),
                self.buffers.len(),
                params.len(),
                buffers.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(params) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.with_requires_grad(true);
        }
        for (b, (name, value)) in self.buffers.iter_mut().zip(buffers) {
            if b.name != name || b.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("buffer {name} does not match {}", b.name)));
            }
            b.value = value;
        }
        Ok(())
    }
}

/// Seeded uniform tensor, used by tests and synthetic fixtures.
pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_lenet() -> AutoencoderSpec {
        lenet_like(
            &[16, 16, 1],
            &PresetParams {
                base_width: 4,
                code_size: 8,
                kernel: 3,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = small_lenet();
        let sel = spec.uniform_selectors(SelectorKind::AvgPool).unwrap();
        let a = build_autoencoder(&spec, &sel, 7).unwrap();
        let b = build_autoencoder(&spec, &sel, 7).unwrap();
        let c = build_autoencoder(&spec, &sel, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.param_count() > 0);
    }

    #[test]
    fn missing_selector_rejected() {
        let spec = small_lenet();
        let mut sel = spec.uniform_selectors(SelectorKind::AvgPool).unwrap();
        sel.remove(&1);
        let err = build_autoencoder(&spec, &sel, 0).unwrap_err();
        assert!(err.to_string().contains("no selector"), "{err}");
    }

    #[test]
    fn decoder_shape_mismatch_rejected() {
        let mut spec = small_lenet();
        spec.decoder_layers.pop();
        let sel = spec.uniform_selectors(SelectorKind::AvgPool);
        assert!(sel.is_ok());
        assert!(build_autoencoder(&spec, &sel.unwrap(), 0).is_err());
    }

    #[test]
    fn reconstruct_preserves_shape() {
        let spec = lenet_like(
            &[32, 32, 3],
            &PresetParams {
                base_width: 2,
                code_size: 8,
                kernel: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let sel = spec.uniform_selectors(SelectorKind::AvgPool).unwrap();
        let m = build_autoencoder(&spec, &sel, 1).unwrap();
        let x = random_tensor(&[1, 32, 32, 3], 0.0, 1.0, 3);
        let y = m.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), &[1, 32, 32, 3]);
        let err: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert!(err > 0.0);
    }

    #[test]
    fn batch_shape_checked() {
        let spec = small_lenet();
        let sel = spec.uniform_selectors(SelectorKind::AvgPool).unwrap();
        let m = build_autoencoder(&spec, &sel, 0).unwrap();
        let x = Tensor::zeros(&[2, 8, 8, 1]);
        assert!(m.encode_with_taps(&x).is_err());
        assert!(m.reconstruct(&x).is_err());
    }
}
