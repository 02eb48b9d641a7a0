//! Per-layer hypersphere losses, centroid and radius estimation, and the
//! regularized multi-layer objective.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Model;

pub const DEFAULT_EPSILON_GUARD: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    #[default]
    Soft,
    Hard,
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::invalid(format!("boundary must be soft or hard, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for BoundaryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
        })
    }
}

/// Centroid `c_j`, squared radius `R_j²` and outlier fraction ν of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypersphere {
    pub layer_index: usize,
    pub centroid: Vec<f32>,
    pub radius_sq: f32,
    pub nu: f32,
}

impl Hypersphere {
    pub fn new(layer_index: usize, centroid: Vec<f32>, radius_sq: f32, nu: f32) -> Result<Self> {
        check_nu(nu)?;
        if centroid.is_empty() {
            return Err(Error::Empty("centroid"));
        }
        if !(radius_sq >= 0.0) || centroid.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "layer {layer_index}: radius_sq must be >= 0 and the centroid finite"
            )));
        }
        Ok(Self {
            layer_index,
            centroid,
            radius_sq,
            nu,
        })
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }
}

fn check_nu(nu: f32) -> Result<()> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::invalid(format!("nu must lie in (0, 1], got {nu}")));
    }
    Ok(())
}

/// Ordered, non-empty set of layer indices entering the objective.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerSet(BTreeSet<usize>);

impl LayerSet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Empty("layer set"));
        }
        Ok(Self(set))
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.0.iter().copied().collect()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.contains(&j)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.iter().next_back().unwrap()
    }

    /// Rejects indices that are not tapped in `model`.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        let tapped = model.tapped_layers();
        if let Some(j) = self.indices().find(|j| !tapped.contains(j)) {
            return Err(Error::invalid(format!(
                "layer {j} is not a tapped layer (tapped: {tapped:?})"
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for LayerSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LayerSet> for Vec<usize> {
    fn from(s: LayerSet) -> Self {
        s.to_vec()
    }
}

impl std::fmt::Display for LayerSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.indices().map(|j| j.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl std::str::FromStr for LayerSet {
    type Err = Error;

    /// Comma or space separated indices, e.g. `"1,2,3"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()) {
            out.push(
                part.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer index {part:?} in {s:?}")))?,
            );
        }
        Self::new(out)
    }
}

/// Snaps coordinates with `|v| < guard` to `±guard` (`+guard` for zero).
pub fn apply_epsilon_guard(centroid: &mut [f32], guard: f32) {
    for v in centroid {
        if v.abs() < guard {
            *v = if *v < 0.0 { -guard } else { guard };
        }
    }
}

/// Mean of the rows of `features` (`[N, D]`), with the epsilon guard.
pub fn centroid_of(features: &Tensor, epsilon_guard: f32) -> Result<Vec<f32>> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::shape("centroid", format!("expected [N, D], got {s:?}")));
    }
    let mut acc = vec![0.0f64; s[1]];
    for row in features.data().chunks_exact(s[1]) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
    }
    let mut c: Vec<f32> = acc.iter().map(|a| (a / s[0] as f64) as f32).collect();
    apply_epsilon_guard(&mut c, epsilon_guard);
    Ok(c)
}

/// Inference-mode centroids of `data` (`[N, H, W, C]`) at every layer of
/// `layer_set`, processed in chunks of `batch_size`. Radii start at zero.
pub fn estimate_centroids(
    model: &Model,
    data: &Tensor,
    layer_set: &LayerSet,
    nu: f32,
    epsilon_guard: f32,
    batch_size: usize,
) -> Result<Vec<Hypersphere>> {
    check_nu(nu)?;
    layer_set.check_against(model)?;
    if data.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Empty("centroid dataset"));
    }
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut n = 0usize;
    for chunk in batches(data, batch_size.max(1)) {
        let feats = model.tap_features(&chunk)?;
        n += chunk.shape()[0];
        for j in layer_set.indices() {
            let f = &feats[&j];
            let d = f.shape()[1];
            let acc = sums.entry(j).or_insert_with(|| vec![0.0; d]);
            for row in f.data().chunks_exact(d) {
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
            }
        }
    }
    sums.into_iter()
        .map(|(j, acc)| {
            let mut c: Vec<f32> = acc.iter().map(|a| (a / n as f64) as f32).collect();
            apply_epsilon_guard(&mut c, epsilon_guard);
            Hypersphere::new(j, c, 0.0, nu)
        })
        .collect()
}

/// Consecutive leading-axis slices of at most `size` samples.
pub fn batches(data: &Tensor, size: usize) -> impl Iterator<Item = Tensor> + '_ {
    let n = data.shape()[0];
    let per = data.numel() / n.max(1);
    let rest = data.shape()[1..].to_vec();
    (0..n).step_by(size.max(1)).map(move |start| {
        let end = (start + size).min(n);
        let mut shape = vec![end - start];
        shape.extend_from_slice(&rest);
        Tensor::from_parts(shape, data.data()[start * per..end * per].to_vec())
    })
}

/// Index `ceil((1 − ν)·n) − 1` of the ascending sort, clamped to `[0, n − 1]`.
pub fn quantile_index(n: usize, nu: f32) -> usize {
    let q = (1.0 - nu as f64) * n as f64;
    let r = q.round();
    // 1 − 0.1 is not exact in binary; treat near-integers as integers
    let q = if (q - r).abs() < 1e-6 { r } else { q.ceil() };
    (q as i64 - 1).clamp(0, n as i64 - 1) as usize
}

/// The (1 − ν)-quantile of squared distances, nearest rank from above.
pub fn update_radius(distances_sq: &[f32], nu: f32) -> Result<f32> {
    check_nu(nu)?;
    if distances_sq.is_empty() {
        return Err(Error::Empty("distances for radius update"));
    }
    if distances_sq.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::invalid("squared distances must be finite and >= 0"));
    }
    let mut sorted = distances_sq.to_vec();
    sorted.sort_by(f32::total_cmp);
    Ok(sorted[quantile_index(sorted.len(), nu)])
}

fn sphere_distances(tape: &mut Tape, features: Var, sphere: &Hypersphere, batch_size: usize) -> Result<Var> {
    check_nu(sphere.nu)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let s = tape.value(features).shape();
    if s.len() != 2 || s[1] != sphere.dim() {
        return Err(Error::shape(
            "layer_loss",
            format!(
                "features {s:?} vs centroid of layer {} with dim {}",
                sphere.layer_index,
                sphere.dim()
            ),
        ));
    }
    let c = tape.constant(Tensor::new(vec![sphere.dim()], sphere.centroid.clone())?);
    tape.squared_l2_distance(features, c)
}

/// Soft-boundary loss `R² + 1/(|B|ν) Σ max(0, ‖φ − c‖² − R²)` over `features` `[N, D]`.
pub fn loss_soft_layer(tape: &mut Tape, features: Var, sphere: &Hypersphere, batch_size: usize) -> Result<Var> {
    let d = sphere_distances(tape, features, sphere, batch_size)?;
    let excess = tape.add_scalar(d, -sphere.radius_sq);
    let hinge = tape.relu(excess);
    let total = tape.sum(hinge);
    let scaled = tape.scale(total, 1.0 / (batch_size as f32 * sphere.nu));
    Ok(tape.add_scalar(scaled, sphere.radius_sq))
}

/// Hard-boundary loss `1/(|B|ν) Σ ‖φ − c‖²`.
pub fn loss_hard_layer(tape: &mut Tape, features: Var, sphere: &Hypersphere, batch_size: usize) -> Result<Var> {
    let d = sphere_distances(tape, features, sphere, batch_size)?;
    let total = tape.sum(d);
    Ok(tape.scale(total, 1.0 / (batch_size as f32 * sphere.nu)))
}

pub fn loss_layer(
    tape: &mut Tape,
    mode: BoundaryMode,
    features: Var,
    sphere: &Hypersphere,
    batch_size: usize,
) -> Result<Var> {
    match mode {
        BoundaryMode::Soft => loss_soft_layer(tape, features, sphere, batch_size),
        BoundaryMode::Hard => loss_hard_layer(tape, features, sphere, batch_size),
    }
}

/// `(1/|J|) Σ_j L_j + (λ/2) Σ_p ‖θ_p‖²`, with `params` already on `tape`.
pub fn total_objective(tape: &mut Tape, per_layer_losses: &[Var], params: &[Var], lambda: f32) -> Result<Var> {
    let (&first, rest) = per_layer_losses
        .split_first()
        .ok_or(Error::Empty("per-layer losses"))?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut sum = first;
    for &l in rest {
        sum = tape.add(sum, l)?;
    }
    let mut total = tape.scale(sum, 1.0 / per_layer_losses.len() as f32);
    if lambda > 0.0 && !params.is_empty() {
        let mut reg: Option<Var> = None;
        for &p in params {
            let sq = tape.mul(p, p)?;
            let s = tape.sum(sq);
            reg = Some(match reg {
                Some(r) => tape.add(r, s)?,
                None => s,
            });
        }
        let reg = tape.scale(reg.unwrap(), lambda / 2.0);
        total = tape.add(total, reg)?;
    }
    Ok(total)
}

/// Records `params[range]` on `tape` (for the regularizer).
pub fn param_vars(tape: &mut Tape, params: &[Parameter], range: std::ops::Range<usize>) -> Vec<Var> {
    range.map(|i| tape.param(i, &params[i])).collect()
}

/// Mean squared error between `input` and `output`.
pub fn reconstruction_loss(tape: &mut Tape, input: Var, output: Var) -> Result<Var> {
    tape.mse(input, output)
}
