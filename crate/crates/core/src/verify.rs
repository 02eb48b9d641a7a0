//! Randomized finite-difference checks of every differentiable operator and
//! of both per-layer losses.
//!
//! Points are drawn away from non-differentiable kinks (rectifier zero,
//! max-pool ties, the hinge of the soft loss) so that a central difference
//! of width `2·step` never straddles one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad_check, Tape, Tensor, Var};
use crate::error::Result;
use crate::objective::{loss_hard_layer, loss_soft_layer, Hypersphere};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub trials: usize,
    pub step: f32,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            step: 1e-2,
            tol: 1e-3,
            seed: 0,
        }
    }
}

/// Result of all trials of one operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorCheck {
    pub operator: String,
    pub trials: usize,
    /// Gradient checks run (one per differentiable input per trial).
    pub checks: usize,
    pub failures: usize,
    pub worst_deviation: f64,
    pub first_failure: Option<String>,
}

impl OperatorCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub const OPERATORS: &[&str] = &[
    "dense",
    "conv2d",
    "transposed_conv2d",
    "max_pool2d",
    "avg_pool2d",
    "adaptive_avg_pool2d",
    "upsample",
    "relu",
    "leaky_relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sum",
    "mean",
    "mse",
    "squared_l2_distance",
    "max_over_axis",
    "reshape",
    "batch_norm",
    "loss_soft_layer",
    "loss_hard_layer",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with `|v| ≥ gap`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Pairwise distinct values at least `gap` apart, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f32> = (0..n).map(|k| (k as f32 - n as f32 / 2.0) * 1.5 * gap).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    let jitter: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..0.4 * gap)).collect();
    Tensor::new(shape.to_vec(), levels.iter().zip(jitter).map(|(l, j)| l + j).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output entry matters.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let w = t.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

struct Acc<'a> {
    cfg: &'a SuiteConfig,
    out: OperatorCheck,
}

impl Acc<'_> {
    fn check<F: Fn(&mut Tape, Var) -> Result<Var>>(&mut self, what: &str, point: &Tensor, f: F) -> Result<()> {
        let r = grad_check(f, point, self.cfg.step, self.cfg.tol)?;
        self.out.checks += 1;
        self.out.worst_deviation = self.out.worst_deviation.max(r.max_deviation);
        if !r.passed {
            self.out.failures += 1;
            if self.out.first_failure.is_none() {
                self.out.first_failure = Some(match r.failure {
                    Some(f) => format!("{what}: {f}"),
                    None => format!(
                        "{what} {:?}: entry {} analytic {:.6e} numeric {:.6e}",
                        point.shape(),
                        r.worst_index,
                        r.analytic[r.worst_index],
                        r.numeric[r.worst_index]
                    ),
                });
            }
        }
        Ok(())
    }
}

fn trial(op: &str, rng: &mut ChaCha8Rng, acc: &mut Acc<'_>) -> Result<()> {
    macro_rules! unary {
        ($x:expr, |$t:ident, $v:ident| $body:expr) => {{
            let x = $x;
            acc.check("x", &x, |$t, $v| {
                let y = $body?;
                project($t, y)
            })?;
        }};
    }
    let len = rng.gen_range(1..65);
    match op {
        "dense" => {
            let (n, di, d_o) = (rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..9));
            let x = uniform(rng, &[n, di], -1.0, 1.0);
            let w = uniform(rng, &[di, d_o], -1.0, 1.0);
            let b = uniform(rng, &[d_o], -1.0, 1.0);
            acc.check("x", &x, |t, v| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.dense(v, w, Some(b))?;
                project(t, y)
            })?;
            acc.check("w", &w, |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = t.dense(x, v, Some(b))?;
                project(t, y)
            })?;
            acc.check("b", &b, |t, v| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.dense(x, w, Some(v))?;
                project(t, y)
            })?;
        }
        "conv2d" | "transposed_conv2d" => {
            let transposed = op == "transposed_conv2d";
            let (h, w) = if transposed {
                (rng.gen_range(2..5), rng.gen_range(2..5))
            } else {
                (rng.gen_range(3..6), rng.gen_range(3..6))
            };
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4));
            let k = rng.gen_range(1..4usize);
            let stride = rng.gen_range(1..3);
            let pad = if transposed {
                rng.gen_range(0..k.min(2))
            } else {
                rng.gen_range(0..2)
            };
            let x = uniform(rng, &[1, h, w, cin], -1.0, 1.0);
            let kw = uniform(rng, &[k, k, cin, cout], -1.0, 1.0);
            let b = uniform(rng, &[cout], -1.0, 1.0);
            let run = move |t: &mut Tape, x: Var, k: Var, b: Var| -> Result<Var> {
                let y = if transposed {
                    t.transposed_conv2d(x, k, Some(b), stride, pad)?
                } else {
                    t.conv2d(x, k, Some(b), stride, pad)?
                };
                project(t, y)
            };
            acc.check("x", &x, |t, v| {
                let (k, b) = (t.constant(kw.clone()), t.constant(b.clone()));
                run(t, v, k, b)
            })?;
            acc.check("kernel", &kw, |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                run(t, x, v, b)
            })?;
            acc.check("bias", &b, |t, v| {
                let (x, k) = (t.constant(x.clone()), t.constant(kw.clone()));
                run(t, x, k, v)
            })?;
        }
        "max_pool2d" => {
            let (h, w, c) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4), rng.gen_range(1..3));
            unary!(distinct(rng, &[1, h, w, c], 0.05), |t, v| t.max_pool2d(v, (2, 2), 2));
        }
        "avg_pool2d" => {
            let (h, w, c) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4), rng.gen_range(1..3));
            unary!(uniform(rng, &[1, h, w, c], -1.0, 1.0), |t, v| t.avg_pool2d(v, (2, 2), 2));
        }
        "adaptive_avg_pool2d" => {
            let g = rng.gen_range(1..3);
            let (h, w) = (g * rng.gen_range(1..4), g * rng.gen_range(1..4));
            unary!(uniform(rng, &[2, h, w, 2], -1.0, 1.0), |t, v| t.adaptive_avg_pool2d(v, (g, g)));
        }
        "upsample" => {
            let f = rng.gen_range(1..4);
            unary!(uniform(rng, &[1, 2, 2, 2], -1.0, 1.0), |t, v| t.upsample(v, f));
        }
        "relu" => unary!(away_from_zero(rng, &[len], 0.05), |t, v| Ok::<_, crate::Error>(t.relu(v))),
        "leaky_relu" => {
            unary!(away_from_zero(rng, &[len], 0.05), |t, v| Ok::<_, crate::Error>(t.leaky_relu(v)))
        }
        "sigmoid" => unary!(uniform(rng, &[len], -4.0, 4.0), |t, v| Ok::<_, crate::Error>(t.sigmoid(v))),
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            unary!(uniform(rng, &[len], -1.0, 1.0), |t, v| Ok::<_, crate::Error>(t.scale(v, s)));
        }
        "add_scalar" => {
            let s = rng.gen_range(-2.0..2.0);
            unary!(uniform(rng, &[len], -1.0, 1.0), |t, v| Ok::<_, crate::Error>(t.add_scalar(v, s)));
        }
        "sum" | "mean" => {
            let shape = [rng.gen_range(1..9), rng.gen_range(1..9)];
            let x = uniform(rng, &shape, -1.0, 1.0);
            let is_sum = op == "sum";
            acc.check("x", &x, |t, v| {
                let r = if is_sum { t.sum(v) } else { t.mean(v) };
                project(t, r)
            })?;
        }
        "reshape" => {
            let (a, b) = (rng.gen_range(1..9), rng.gen_range(1..9));
            unary!(uniform(rng, &[a, b], -1.0, 1.0), |t, v| t.reshape(v, &[b, a]));
        }
        "max_over_axis" => {
            let shape = [rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4)];
            let axis = rng.gen_range(0..3);
            unary!(distinct(rng, &shape, 0.05), |t, v| t.max_over_axis(v, axis));
        }
        "add" | "sub" | "mul" | "mse" => {
            let shape = [rng.gen_range(1..9), rng.gen_range(1..9)];
            let a = uniform(rng, &shape, -1.0, 1.0);
            let b = uniform(rng, &shape, -1.0, 1.0);
            let apply = |t: &mut Tape, x: Var, y: Var| -> Result<Var> {
                let r = match op {
                    "add" => t.add(x, y)?,
                    "sub" => t.sub(x, y)?,
                    "mul" => t.mul(x, y)?,
                    _ => t.mse(x, y)?,
                };
                project(t, r)
            };
            acc.check("a", &a, |t, v| {
                let y = t.constant(b.clone());
                apply(t, v, y)
            })?;
            acc.check("b", &b, |t, v| {
                let x = t.constant(a.clone());
                apply(t, x, v)
            })?;
        }
        "squared_l2_distance" => {
            let (n, d) = (rng.gen_range(1..8), rng.gen_range(1..9));
            let a = uniform(rng, &[n, d], -1.0, 1.0);
            let c = uniform(rng, &[d], -1.0, 1.0);
            acc.check("a", &a, |t, v| {
                let c = t.constant(c.clone());
                let y = t.squared_l2_distance(v, c)?;
                project(t, y)
            })?;
            acc.check("c", &c, |t, v| {
                let a = t.constant(a.clone());
                let y = t.squared_l2_distance(a, v)?;
                project(t, y)
            })?;
        }
        "batch_norm" => {
            let (n, d) = (rng.gen_range(3..7), rng.gen_range(1..5));
            // finite differences degrade as σ⁻³; keep every column spread out
            let x = loop {
                let x = uniform(rng, &[n, d], -1.0, 1.0);
                if (0..d).all(|c| column_variance(&x, c) >= 0.25) {
                    break x;
                }
            };
            let g = uniform(rng, &[d], 0.5, 1.5);
            let b = uniform(rng, &[d], -0.5, 0.5);
            let run = |t: &mut Tape, x: Var, g: Var, b: Var| -> Result<Var> {
                let (y, _) = t.batch_norm_train(x, g, b, 1e-3)?;
                project(t, y)
            };
            acc.check("x", &x, |t, v| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                run(t, v, g, b)
            })?;
            acc.check("gamma", &g, |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                run(t, x, v, b)
            })?;
            acc.check("beta", &b, |t, v| {
                let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
                run(t, x, g, v)
            })?;
        }
        "loss_soft_layer" | "loss_hard_layer" => {
            let (features, sphere) = loss_instance(rng, acc.cfg.step)?;
            let n = features.shape()[0];
            let soft = op == "loss_soft_layer";
            acc.check("features", &features, |t, v| {
                if soft {
                    loss_soft_layer(t, v, &sphere, n)
                } else {
                    loss_hard_layer(t, v, &sphere, n)
                }
            })?;
        }
        other => unreachable!("unknown operator {other}"),
    }
    Ok(())
}

fn column_variance(x: &Tensor, c: usize) -> f32 {
    let d = x.shape()[1];
    let col: Vec<f32> = x.data().iter().skip(c).step_by(d).copied().collect();
    let m = col.iter().sum::<f32>() / col.len() as f32;
    col.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / col.len() as f32
}

/// Random 8-dimensional features and a sphere whose radius keeps every
/// squared distance clear of the hinge by more than a perturbation can move it.
pub fn loss_instance(rng: &mut ChaCha8Rng, step: f32) -> Result<(Tensor, Hypersphere)> {
    let n = rng.gen_range(2..8);
    let c: Vec<f32> = (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let nu = rng.gen_range(0.05..1.0);
    loop {
        let f = uniform(rng, &[n, 8], -1.0, 1.0);
        let mut dist = Vec::with_capacity(n);
        let mut reach = 0.0f32;
        for row in f.data().chunks_exact(8) {
            dist.push(row.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f32>());
            reach = reach.max(row.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max));
        }
        let margin = (4.0 * step * (reach + step)).max(1e-4);
        for _ in 0..100 {
            let r2 = rng.gen_range(0.0..dist.iter().copied().fold(0.0, f32::max) + 0.5);
            if dist.iter().all(|d| (d - r2).abs() > margin) {
                return Ok((f, Hypersphere::new(0, c, r2, nu)?));
            }
        }
    }
}

/// Runs `cfg.trials` random instances of every operator in [`OPERATORS`].
pub fn operator_suite(cfg: &SuiteConfig) -> Result<Vec<OperatorCheck>> {
    let mut out = Vec::with_capacity(OPERATORS.len());
    for (k, op) in OPERATORS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1000).wrapping_add(k as u64));
        let mut acc = Acc {
            cfg,
            out: OperatorCheck {
                operator: op.to_string(),
                trials: cfg.trials,
                checks: 0,
                failures: 0,
                worst_deviation: 0.0,
                first_failure: None,
            },
        };
        for _ in 0..cfg.trials {
            trial(op, &mut rng, &mut acc)?;
        }
        out.push(acc.out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes() {
        let r = operator_suite(&SuiteConfig {
            trials: 5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.len(), OPERATORS.len());
        for c in &r {
            assert!(c.passed(), "{}: {:?}", c.operator, c.first_failure);
        }
    }
}
