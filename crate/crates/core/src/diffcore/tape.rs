//! Computation record and reverse-mode gradient propagation.
//!
//! Every operator evaluates eagerly and appends a node holding its output
//! and whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order
//! because inputs always precede their consumers.

use serde::{Deserialize, Serialize};

use super::kernels::{self, Geom, Kernel};
use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Default negative slope of [`Tape::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f32 = 0.01;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operator kinds reachable through [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Dense,
    Conv2d,
    TransposedConv2d,
    MaxPool2d,
    AvgPool2d,
    Upsample,
    Relu,
    LeakyRelu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Mse,
    SquaredL2Distance,
    MaxOverAxis,
    Reshape,
    BatchNorm,
}

/// Attributes consumed by [`Tape::forward_op`]; unused fields are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct OpAttrs {
    pub stride: usize,
    pub padding: usize,
    pub kernel: (usize, usize),
    pub slope: f32,
    pub scalar: f32,
    pub axis: usize,
    pub factor: usize,
    pub shape: Vec<usize>,
    pub eps: f32,
}

impl Default for OpAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            kernel: (2, 2),
            slope: LEAKY_RELU_SLOPE,
            scalar: 1.0,
            axis: 0,
            factor: 2,
            shape: Vec::new(),
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf {
        param: Option<usize>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        transposed: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f32,
    },
    AddScalar {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SqDist {
        a: Var,
        c: Var,
        dim: usize,
        broadcast: bool,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Map {
        x: Var,
        df: fn(f32) -> f32,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            Dense { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            MaxPool { x, .. }
            | AvgPool { x, .. }
            | Upsample { x, .. }
            | Relu { x }
            | LeakyRelu { x, .. }
            | Sigmoid { x }
            | Scale { x, .. }
            | AddScalar { x }
            | Sum { x }
            | Mean { x }
            | MaxAxis { x, .. }
            | Reshape { x }
            | Map { x, .. } => vec![*x],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Mse { a, b } => vec![*a, *b],
            SqDist { a, c, .. } => vec![*a, *c],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Single-threaded record of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }
}

fn geom4(op: &'static str, t: &Tensor) -> Result<Geom> {
    if t.shape().len() != 4 {
        return Err(Error::shape(
            op,
            format!("expected NHWC input of rank 4, got {:?}", t.shape()),
        ));
    }
    Ok(Geom::from_shape(t.shape()))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input; gradients flow to it when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { param: None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records parameter `id` (its position in the slice later passed to
    /// [`Tape::backward_into`]).
    pub fn param(&mut self, id: usize, p: &Parameter) -> Var {
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf { param: Some(id) },
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Generic dispatch over [`OpKind`]; the typed methods are equivalent.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: &[usize]| -> Result<()> {
            if n.contains(&inputs.len()) {
                Ok(())
            } else {
                Err(Error::shape(
                    "forward_op",
                    format!("{kind:?} takes {n:?} inputs, got {}", inputs.len()),
                ))
            }
        };
        match kind {
            OpKind::Dense => {
                arity(&[2, 3])?;
                self.dense(inputs[0], inputs[1], inputs.get(2).copied())
            }
            OpKind::Conv2d => {
                arity(&[2, 3])?;
                self.conv2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride,
                    attrs.padding,
                )
            }
            OpKind::TransposedConv2d => {
                arity(&[2, 3])?;
                self.transposed_conv2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride,
                    attrs.padding,
                )
            }
            OpKind::MaxPool2d => {
                arity(&[1])?;
                self.max_pool2d(inputs[0], attrs.kernel, attrs.stride)
            }
            OpKind::AvgPool2d => {
                arity(&[1])?;
                self.avg_pool2d(inputs[0], attrs.kernel, attrs.stride)
            }
            OpKind::Upsample => {
                arity(&[1])?;
                self.upsample(inputs[0], attrs.factor)
            }
            OpKind::Relu => {
                arity(&[1])?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::LeakyRelu => {
                arity(&[1])?;
                Ok(self.leaky_relu_with(inputs[0], attrs.slope))
            }
            OpKind::Sigmoid => {
                arity(&[1])?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Add => {
                arity(&[2])?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(&[2])?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(&[2])?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Scale => {
                arity(&[1])?;
                Ok(self.scale(inputs[0], attrs.scalar))
            }
            OpKind::AddScalar => {
                arity(&[1])?;
                Ok(self.add_scalar(inputs[0], attrs.scalar))
            }
            OpKind::Sum => {
                arity(&[1])?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(&[1])?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::Mse => {
                arity(&[2])?;
                self.mse(inputs[0], inputs[1])
            }
            OpKind::SquaredL2Distance => {
                arity(&[2])?;
                self.squared_l2_distance(inputs[0], inputs[1])
            }
            OpKind::MaxOverAxis => {
                arity(&[1])?;
                self.max_over_axis(inputs[0], attrs.axis)
            }
            OpKind::Reshape => {
                arity(&[1])?;
                self.reshape(inputs[0], &attrs.shape)
            }
            OpKind::BatchNorm => {
                arity(&[3])?;
                self.batch_norm_train(inputs[0], inputs[1], inputs[2], attrs.eps)
                    .map(|(v, _)| v)
            }
        }
    }

    /// `x [N, in] · w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0f32; n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape(
                    "dense",
                    format!("bias {:?}, expected [{dout}]", bv.shape()),
                ));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..n {
            let orow = &mut out[r * dout..(r + 1) * dout];
            for i in 0..din {
                let a = xd[r * din + i];
                for (o, &wj) in orow.iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
                    *o += a * wj;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, dout], out), Op::Dense { x, w, b }))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    op,
                    format!("bias {:?}, expected [{cout}]", self.value(b).shape()),
                ));
            }
        }
        Ok(())
    }

    /// NHWC cross-correlation with kernel `[KH, KW, C_in, C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xg = geom4("conv2d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != xg.c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ws:?} incompatible with input channels {}", xg.c),
            ));
        }
        let k = Kernel::from_shape(&ws);
        self.check_bias("conv2d", b, k.cout)?;
        let og = kernels::conv2d_out(xg, k, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {}x{} stride {stride} pad {pad} does not fit input {}x{}", k.kh, k.kw, xg.h, xg.w),
            )
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xg,
            self.value(w).data(),
            k,
            b.map(|b| self.value(b).data()),
            stride,
            pad,
            og,
        );
        Ok(self.push(
            Tensor::from_parts(og.shape(), out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                transposed: false,
            },
        ))
    }

    /// Adjoint of [`Tape::conv2d`]; output side `(in - 1)·stride + k - 2·pad`.
    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xg = geom4("transposed_conv2d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != xg.c {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("kernel {ws:?} incompatible with input channels {}", xg.c),
            ));
        }
        let k = Kernel::from_shape(&ws);
        self.check_bias("transposed_conv2d", b, k.cout)?;
        let og = kernels::tconv2d_out(xg, k, stride, pad).ok_or_else(|| {
            Error::shape(
                "transposed_conv2d",
                format!("padding {pad} consumes the whole output"),
            )
        })?;
        let out = kernels::tconv2d_forward(
            self.value(x).data(),
            xg,
            self.value(w).data(),
            k,
            b.map(|b| self.value(b).data()),
            stride,
            pad,
            og,
        );
        Ok(self.push(
            Tensor::from_parts(og.shape(), out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                transposed: true,
            },
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: usize) -> Result<Var> {
        let xg = geom4("max_pool2d", self.value(x))?;
        let og = kernels::pool_out(xg, kernel.0, kernel.1, stride, stride).ok_or_else(|| {
            Error::shape(
                "max_pool2d",
                format!("window {kernel:?} stride {stride} on input {}x{}", xg.h, xg.w),
            )
        })?;
        let (out, argmax) = kernels::max_pool_forward(
            self.value(x).data(),
            xg,
            kernel.0,
            kernel.1,
            stride,
            stride,
            og,
        );
        Ok(self.push(Tensor::from_parts(og.shape(), out), Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: usize) -> Result<Var> {
        self.avg_pool2d_strided(x, kernel, (stride, stride))
    }

    /// Averages each sample's map down to a `grid.0 × grid.1` map.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let xg = geom4("adaptive_avg_pool2d", self.value(x))?;
        if grid.0 == 0 || grid.1 == 0 || xg.h % grid.0 != 0 || xg.w % grid.1 != 0 {
            return Err(Error::shape(
                "adaptive_avg_pool2d",
                format!("grid {grid:?} does not divide input {}x{}", xg.h, xg.w),
            ));
        }
        let k = (xg.h / grid.0, xg.w / grid.1);
        self.avg_pool2d_strided(x, k, k)
    }

    fn avg_pool2d_strided(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let xg = geom4("avg_pool2d", self.value(x))?;
        let og = kernels::pool_out(xg, kernel.0, kernel.1, stride.0, stride.1).ok_or_else(|| {
            Error::shape(
                "avg_pool2d",
                format!("window {kernel:?} stride {stride:?} on input {}x{}", xg.h, xg.w),
            )
        })?;
        let out = kernels::avg_pool_forward(
            self.value(x).data(),
            xg,
            kernel.0,
            kernel.1,
            stride.0,
            stride.1,
            og,
        );
        Ok(self.push(
            Tensor::from_parts(og.shape(), out),
            Op::AvgPool { x, kernel, stride },
        ))
    }

    /// Nearest-neighbour replication by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xg = geom4("upsample", self.value(x))?;
        if factor == 0 {
            return Err(Error::shape("upsample", "factor must be positive"));
        }
        let (out, og) = kernels::upsample_forward(self.value(x).data(), xg, factor);
        Ok(self.push(Tensor::from_parts(og.shape(), out), Op::Upsample { x, factor }))
    }

    fn map_value(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map_value(x, |v| v.max(0.0));
        self.push(t, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.leaky_relu_with(x, LEAKY_RELU_SLOPE)
    }

    pub fn leaky_relu_with(&mut self, x: Var, slope: f32) -> Var {
        let t = self.map_value(x, |v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map_value(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(t, Op::Sigmoid { x })
    }

    /// Elementwise custom function with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: fn(f32) -> f32, df: fn(f32) -> f32) -> Var {
        let t = self.map_value(x, f);
        self.push(t, Op::Map { x, df })
    }

    fn zip_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        Ok(Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_values("add", a, b, |p, q| p + q)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_values("sub", a, b, |p, q| p - q)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_values("mul", a, b, |p, q| p * q)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.map_value(x, |v| v * s);
        self.push(t, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let t = self.map_value(x, |v| v + s);
        self.push(t, Op::AddScalar { x })
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(s as f32), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean_f64();
        self.push(Tensor::scalar(m as f32), Op::Mean { x })
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mse", av, bv)?;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| {
                let d = (p - q) as f64;
                d * d
            })
            .sum();
        let m = s / av.numel() as f64;
        Ok(self.push(Tensor::scalar(m as f32), Op::Mse { a, b }))
    }

    /// Squared Euclidean distance along the last axis.
    ///
    /// `a` is `[.., D]`; `c` either has the same shape or is a single `[D]`
    /// vector broadcast against every row. The output drops the last axis
    /// (a `[1]` scalar when `a` is a single vector).
    pub fn squared_l2_distance(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        let dim = *av.shape().last().unwrap();
        let broadcast = av.shape() != cv.shape();
        if broadcast && cv.shape() != [dim] {
            return Err(Error::shape(
                "squared_l2_distance",
                format!("{:?} vs {:?}", av.shape(), cv.shape()),
            ));
        }
        let rows = av.numel() / dim;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let ar = &av.data()[r * dim..(r + 1) * dim];
            let cr = if broadcast {
                cv.data()
            } else {
                &cv.data()[r * dim..(r + 1) * dim]
            };
            let d: f64 = ar
                .iter()
                .zip(cr)
                .map(|(&p, &q)| {
                    let e = (p - q) as f64;
                    e * e
                })
                .sum();
            out.push(d as f32);
        }
        let shape = if av.shape().len() > 1 {
            av.shape()[..av.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SqDist {
                a,
                c,
                dim,
                broadcast,
            },
        ))
    }

    /// Maximum along `axis`; the axis is removed from the shape.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() {
            return Err(Error::shape(
                "max_over_axis",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let src = (o * len + k) * inner + i;
                    let dst = o * inner + i;
                    if xv.data()[src] > out[dst] {
                        out[dst] = xv.data()[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxAxis { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product::<usize>();
        self.reshape(x, &[n, rest])
    }

    /// Batch normalisation over `[N, D]` using the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 {
            return Err(Error::shape("batch_norm", format!("expected [N, D], got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for row in xv.data().chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in xv.data().chunks_exact(d) {
            for ((q, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let e = v as f64 - m;
                *q += e * e;
            }
        }
        var.iter_mut().for_each(|q| *q /= n as f64);
        let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let var32: Vec<f32> = var.iter().map(|&q| q as f32).collect();
        let out = self.batch_norm_apply(x, gamma, beta, &mean32, &var32, eps, true)?;
        Ok((
            out,
            BatchStats {
                mean: mean32,
                var: var32,
            },
        ))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        self.batch_norm_apply(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        batch_stats: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("batch_norm", format!("expected [N, D], got {s:?}")));
        }
        let d = s[1];
        for (name, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.shape() != [d] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {:?}, expected [{d}]", t.shape()),
                ));
            }
        }
        if mean.len() != d || var.len() != d {
            return Err(Error::shape("batch_norm", "statistics length differs from D"));
        }
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            for j in 0..d {
                xhat.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f32> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Gradients of `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Runs [`Tape::backward`] and adds each parameter leaf's gradient into
    /// `params[id].grad`.
    pub fn backward_into(&self, loss: Var, params: &mut [Parameter]) -> Result<()> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                let Some(g) = &grads.grads[idx] else { continue };
                let p = params.get_mut(id).ok_or_else(|| {
                    Error::invalid(format!("parameter id {id} out of range"))
                })?;
                if p.grad.numel() != g.len() {
                    return Err(Error::shape("backward", format!("parameter {} changed shape", p.name)));
                }
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let ewise = |x: Var, f: &dyn Fn(f32, f32) -> f32| -> Vec<f32> {
            g.iter().zip(val(x)).map(|(&gv, &xv)| f(gv, xv)).collect()
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Dense { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.nodes[w.0].value.shape()[1];
                let (xd, wd) = (val(*x), val(*w));
                if needs(*x) {
                    let mut dx = vec![0.0f32; n * din];
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            dx[r * din + i] = wd[i * dout..(i + 1) * dout]
                                .iter()
                                .zip(grow)
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                    }
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0f32; din * dout];
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let a = xd[r * din + i];
                            for (d, &gv) in dw[i * dout..(i + 1) * dout].iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0f32; dout];
                    for row in g.chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                    acc(*b, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                transposed,
            } => {
                let xg = Geom::from_shape(self.nodes[x.0].value.shape());
                let og = Geom::from_shape(node.value.shape());
                let k = Kernel::from_shape(self.nodes[w.0].value.shape());
                let f = if *transposed {
                    kernels::tconv2d_backward
                } else {
                    kernels::conv2d_backward
                };
                let (dx, dw, db) = f(g, og, val(*x), xg, val(*w), k, *stride, *pad);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::MaxPool { x, argmax } | Op::MaxAxis { x, argmax } => {
                let mut dx = vec![0.0f32; val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::AvgPool { x, kernel, stride } => {
                let xg = Geom::from_shape(self.nodes[x.0].value.shape());
                let og = Geom::from_shape(node.value.shape());
                let dx = kernels::avg_pool_backward(g, og, xg, kernel.0, kernel.1, stride.0, stride.1);
                acc(*x, dx);
            }
            Op::Upsample { x, factor } => {
                let xg = Geom::from_shape(self.nodes[x.0].value.shape());
                let og = Geom::from_shape(node.value.shape());
                acc(*x, kernels::upsample_backward(g, og, xg, *factor));
            }
            Op::Relu { x } => acc(*x, ewise(*x, &|gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                acc(*x, ewise(*x, &|gv, xv| if xv > 0.0 { gv } else { s * gv }))
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect())
            }
            Op::Map { x, df } => acc(*x, ewise(*x, &|gv, xv| gv * df(xv))),
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    acc(*a, ewise(*b, &|gv, bv| gv * bv));
                }
                if needs(*b) {
                    acc(*b, ewise(*a, &|gv, av| gv * av));
                }
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar { x } | Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Sum { x } => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean { x } => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f32; n]);
            }
            Op::Mse { a, b } => {
                let n = val(*a).len() as f32;
                let k = 2.0 * g[0] / n;
                let diff: Vec<f32> = val(*a).iter().zip(val(*b)).map(|(&p, &q)| k * (p - q)).collect();
                if needs(*b) {
                    acc(*b, diff.iter().map(|v| -v).collect());
                }
                acc(*a, diff);
            }
            Op::SqDist {
                a,
                c,
                dim,
                broadcast,
            } => {
                let (ad, cd) = (val(*a), val(*c));
                let mut da = vec![0.0f32; ad.len()];
                for (r, &gv) in g.iter().enumerate() {
                    for j in 0..*dim {
                        let cj = if *broadcast { cd[j] } else { cd[r * dim + j] };
                        da[r * dim + j] = 2.0 * gv * (ad[r * dim + j] - cj);
                    }
                }
                if needs(*c) {
                    let dc = if *broadcast {
                        let mut dc = vec![0.0f32; *dim];
                        for row in da.chunks_exact(*dim) {
                            dc.iter_mut().zip(row).for_each(|(d, &v)| *d -= v);
                        }
                        dc
                    } else {
                        da.iter().map(|v| -v).collect()
                    };
                    acc(*c, dc);
                }
                acc(*a, da);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = inv_std.len();
                let n = xhat.len() / d;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    dgamma[i % d] += gv * h;
                    dbeta[i % d] += gv;
                }
                if needs(*x) {
                    let mut dx = vec![0.0f32; xhat.len()];
                    if *batch_stats {
                        // dx = gamma·inv_std/N · (N·g − Σg − x̂·Σ(g·x̂))
                        let nf = n as f32;
                        for i in 0..xhat.len() {
                            let j = i % d;
                            dx[i] = gam[j] * inv_std[j] / nf
                                * (nf * g[i] - dbeta[j] - xhat[i] * dgamma[j]);
                        }
                    } else {
                        for i in 0..xhat.len() {
                            dx[i] = g[i] * gam[i % d] * inv_std[i % d];
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
        }
    }
}
