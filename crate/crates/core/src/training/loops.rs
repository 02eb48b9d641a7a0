use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RadiusSource, Regime, TrainConfig};
use crate::data::{ensure_normal_only, stack_images, Sample};
use crate::diffcore::{adam_step, zero_grads, AdamState, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Buffer, Mode, Model};
use crate::objective::{
    batches, estimate_centroids, loss_layer, param_vars, reconstruction_loss, total_objective,
    update_radius, BoundaryMode, Hypersphere, LayerSet,
};

/// Salt mixed into the run seed for the batch-order stream.
const SHUFFLE_SALT: u64 = 0x5348_5546;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Joint,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Epoch means of the training signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f32,
    pub recon_loss: Option<f64>,
    pub oc_loss: BTreeMap<usize, f64>,
    /// Radii in force at the end of the epoch.
    pub radius_sq: BTreeMap<usize, f64>,
    /// Mean over feature dimensions of the per-dimension variance.
    pub feature_var: BTreeMap<usize, f64>,
    /// Mean squared distance to the centroid.
    pub mean_tau: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusUpdate {
    pub stage: Stage,
    pub step: usize,
    pub layer: usize,
    pub radius_sq: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub radius_updates: Vec<RadiusUpdate>,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.epochs.extend(other.epochs);
        self.radius_updates.extend(other.radius_updates);
    }

    /// Radius sequence of one layer in update order.
    pub fn radius_history(&self, layer: usize) -> Vec<f32> {
        self.radius_updates
            .iter()
            .filter(|u| u.layer == layer)
            .map(|u| u.radius_sq)
            .collect()
    }

    /// One row per epoch; per-layer columns in ascending layer order.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let layers: Vec<usize> = self
            .epochs
            .iter()
            .flat_map(|e| e.oc_loss.keys().chain(e.feature_var.keys()).copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["stage", "epoch", "lr", "recon_loss"].map(String::from).to_vec();
        for j in &layers {
            for col in ["oc_loss", "radius_sq", "feature_var", "mean_tau"] {
                header.push(format!("{col}_{j}"));
            }
        }
        wr.write_record(&header)?;
        let opt = |v: Option<&f64>| v.map(|x| format!("{x:.8e}")).unwrap_or_default();
        for e in &self.epochs {
            let mut row = vec![
                e.stage.to_string(),
                e.epoch.to_string(),
                format!("{:.8e}", e.lr),
                opt(e.recon_loss.as_ref()),
            ];
            for j in &layers {
                row.push(opt(e.oc_loss.get(j)));
                row.push(opt(e.radius_sq.get(j)));
                row.push(opt(e.feature_var.get(j)));
                row.push(opt(e.mean_tau.get(j)));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_radius_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["stage", "step", "layer", "radius_sq"])?;
        for u in &self.radius_updates {
            wr.write_record([
                u.stage.to_string(),
                u.step.to_string(),
                u.layer.to_string(),
                format!("{:.8e}", u.radius_sq),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Spheres and log of a complete training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub spheres: Vec<Hypersphere>,
    pub log: TrainLog,
}

struct LoopSpec<'a> {
    stage: Stage,
    epochs: usize,
    base_lr: f32,
    recon_weight: f32,
    oc_weight: f32,
    params: Range<usize>,
    layer_set: Option<&'a LayerSet>,
}

#[derive(Default)]
struct LayerAcc {
    n: usize,
    loss: f64,
    tau: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl LayerAcc {
    fn add_features(&mut self, f: &Tensor, centroid: Option<&[f32]>) {
        let d = f.shape()[1];
        if self.sum.is_empty() {
            self.sum = vec![0.0; d];
            self.sumsq = vec![0.0; d];
        }
        for row in f.data().chunks_exact(d) {
            self.n += 1;
            for k in 0..d {
                let v = row[k] as f64;
                self.sum[k] += v;
                self.sumsq[k] += v * v;
            }
            if let Some(c) = centroid {
                self.tau += row.iter().zip(c).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
            }
        }
    }

    fn variance(&self) -> f64 {
        let n = self.n as f64;
        let per: f64 = self
            .sum
            .iter()
            .zip(&self.sumsq)
            .map(|(s, q)| (q / n - (s / n).powi(2)).max(0.0))
            .sum();
        per / self.sum.len().max(1) as f64
    }
}

fn gather(data: &Tensor, idx: &[usize]) -> Tensor {
    let per = data.numel() / data.shape()[0];
    let mut out = Vec::with_capacity(per * idx.len());
    for &i in idx {
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out).expect("gathered rows of a valid tensor")
}

fn snapshot(model: &Model) -> (Vec<Parameter>, Vec<Buffer>) {
    (model.params().to_vec(), model.buffers().to_vec())
}

fn restore(model: &mut Model, snap: (Vec<Parameter>, Vec<Buffer>)) {
    model.params_mut().clone_from_slice(&snap.0);
    model.buffers_mut().clone_from_slice(&snap.1);
}

/// Inference-mode squared distances of every training sample at `layer`.
fn train_set_distances(model: &Model, data: &Tensor, sphere: &Hypersphere, batch: usize) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in batches(data, batch) {
        let f = &model.tap_features(&chunk)?[&sphere.layer_index];
        let d = f.shape()[1];
        for row in f.data().chunks_exact(d) {
            let s: f64 = row
                .iter()
                .zip(&sphere.centroid)
                .map(|(&a, &c)| ((a - c) as f64).powi(2))
                .sum();
            out.push(s as f32);
        }
    }
    Ok(out)
}

fn run_loop(
    model: &mut Model,
    data: &Tensor,
    spheres: &mut [Hypersphere],
    cfg: &TrainConfig,
    spec: LoopSpec<'_>,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if spec.epochs == 0 {
        return Ok(log);
    }
    let n = data.shape()[0];
    let use_recon = spec.recon_weight > 0.0;
    let use_oc = spec.oc_weight > 0.0 && !spheres.is_empty();
    if !use_recon && !use_oc {
        return Err(Error::invalid("both objective weights are zero"));
    }
    let mut adam = AdamState::new(&model.params()[spec.params.clone()], spec.base_lr)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let interval = cfg.radius_interval(n);
    let soft = cfg.boundary == BoundaryMode::Soft;
    let mut step = 0usize;

    for epoch in 0..spec.epochs {
        adam.learning_rate = cfg.lr_at(spec.base_lr, epoch);
        order.shuffle(&mut rng);
        let snap = snapshot(model);
        let (mut recon_sum, mut seen) = (0.0f64, 0usize);
        let mut acc: BTreeMap<usize, LayerAcc> = BTreeMap::new();

        if let (Some(every), Some(ls)) = (cfg.centroid_reestimate_every, spec.layer_set) {
            if spec.stage == Stage::Finetune && epoch > 0 && epoch % every == 0 {
                let fresh = estimate_centroids(model, data, ls, cfg.nu, cfg.epsilon_guard, cfg.batch_size)?;
                for (s, f) in spheres.iter_mut().zip(fresh) {
                    s.centroid = f.centroid;
                }
            }
        }

        for idx in order.chunks(cfg.batch_size) {
            let batch = gather(data, idx);
            let b = idx.len();
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let pass = model.encode(&mut tape, x, Mode::Train)?;
            let mut terms: Vec<Var> = Vec::new();

            if use_recon {
                let y = model.decode(&mut tape, pass.code)?;
                let r = reconstruction_loss(&mut tape, y, x)?;
                recon_sum += tape.value(r).item()? as f64 * b as f64;
                terms.push(if spec.recon_weight == 1.0 { r } else { tape.scale(r, spec.recon_weight) });
            }

            if use_oc {
                let taps: BTreeMap<usize, Var> = pass.taps.iter().copied().collect();
                if soft && step % interval == 0 {
                    for s in spheres.iter_mut() {
                        let dist = match cfg.radius_source {
                            RadiusSource::Batch => {
                                let f = tape.value(taps[&s.layer_index]);
                                let d = f.shape()[1];
                                f.data()
                                    .chunks_exact(d)
                                    .map(|row| {
                                        row.iter()
                                            .zip(&s.centroid)
                                            .map(|(&a, &c)| ((a - c) as f64).powi(2))
                                            .sum::<f64>() as f32
                                    })
                                    .collect()
                            }
                            RadiusSource::TrainSet => train_set_distances(model, data, s, cfg.batch_size)?,
                        };
                        s.radius_sq = update_radius(&dist, s.nu)?;
                        log.radius_updates.push(RadiusUpdate {
                            stage: spec.stage,
                            step,
                            layer: s.layer_index,
                            radius_sq: s.radius_sq,
                        });
                    }
                }
                let mut losses = Vec::with_capacity(spheres.len());
                for s in spheres.iter() {
                    let f = taps[&s.layer_index];
                    let l = loss_layer(&mut tape, cfg.boundary, f, s, b)?;
                    let a = acc.entry(s.layer_index).or_default();
                    a.loss += tape.value(l).item()? as f64 * b as f64;
                    a.add_features(tape.value(f), Some(&s.centroid));
                    losses.push(l);
                }
                let reg = param_vars(&mut tape, model.params(), model.encoder_params());
                let oc = total_objective(&mut tape, &losses, &reg, cfg.lambda)?;
                terms.push(if spec.oc_weight == 1.0 { oc } else { tape.scale(oc, spec.oc_weight) });
            }

            let loss = match terms.as_slice() {
                [one] => *one,
                [a, b] => tape.add(*a, *b)?,
                _ => unreachable!(),
            };
            if !tape.value(loss).item()?.is_finite() {
                restore(model, snap);
                return Err(Error::Divergence {
                    stage: spec.stage.name(),
                    epoch,
                });
            }
            zero_grads(model.params_mut());
            tape.backward_into(loss, model.params_mut())?;
            adam_step(&mut model.params_mut()[spec.params.clone()], &mut adam)?;
            model.apply_batch_stats(&pass.batch_stats);
            seen += b;
            step += 1;
        }

        if model.params().iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
            restore(model, snap);
            return Err(Error::Divergence {
                stage: spec.stage.name(),
                epoch,
            });
        }

        let feature_var: BTreeMap<usize, f64> = acc.iter().map(|(j, a)| (*j, a.variance())).collect();
        if use_oc && feature_var.values().all(|&v| v < cfg.collapse_threshold) {
            let detail = feature_var
                .iter()
                .map(|(j, v)| format!("layer {j}: {v:.3e}"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::Collapse {
                epoch,
                threshold: cfg.collapse_threshold,
                detail,
            });
        }
        log.epochs.push(EpochRecord {
            stage: spec.stage,
            epoch,
            lr: adam.learning_rate,
            recon_loss: use_recon.then(|| recon_sum / seen as f64),
            oc_loss: acc.iter().map(|(j, a)| (*j, a.loss / seen as f64)).collect(),
            radius_sq: if use_oc {
                spheres.iter().map(|s| (s.layer_index, s.radius_sq as f64)).collect()
            } else {
                BTreeMap::new()
            },
            feature_var,
            mean_tau: acc.iter().map(|(j, a)| (*j, a.tau / a.n.max(1) as f64)).collect(),
        });
    }
    Ok(log)
}

fn prepare(model: &Model, data: &[Sample], cfg: &TrainConfig) -> Result<Tensor> {
    cfg.validate()?;
    ensure_normal_only(data)?;
    let t = stack_images(data)?;
    if t.shape()[1..] != model.spec().input_shape[..] {
        return Err(Error::shape(
            "train",
            format!("samples {:?} vs model input {:?}", &t.shape()[1..], model.spec().input_shape),
        ));
    }
    Ok(t)
}

/// Layer set from `cfg`, defaulting to every tapped layer.
pub fn resolve_layer_set(model: &Model, cfg: &TrainConfig) -> Result<LayerSet> {
    let ls = match &cfg.layer_set {
        Some(ls) => ls.clone(),
        None => LayerSet::new(model.tapped_layers())?,
    };
    ls.check_against(model)?;
    Ok(ls)
}

/// Trains encoder and decoder on reconstruction alone at `lr_stage1`.
pub fn pretrain_reconstruction(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    let t = prepare(model, data, cfg)?;
    let all = 0..model.params().len();
    run_loop(
        model,
        &t,
        &mut [],
        cfg,
        LoopSpec {
            stage: Stage::Pretrain,
            epochs: cfg.stage1_epochs,
            base_lr: cfg.lr_stage1,
            recon_weight: 1.0,
            oc_weight: 0.0,
            params: all,
            layer_set: None,
        },
    )
}

/// Trains encoder and selectors on the multi-layer objective at `lr_stage2`;
/// centroids stay fixed and the decoder is not touched.
pub fn finetune_oneclass(
    model: &mut Model,
    data: &[Sample],
    spheres: &mut [Hypersphere],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let t = prepare(model, data, cfg)?;
    if spheres.is_empty() {
        return Err(Error::Empty("hyperspheres"));
    }
    let ls = LayerSet::new(spheres.iter().map(|s| s.layer_index))?;
    ls.check_against(model)?;
    let range = model.encoder_params();
    run_loop(
        model,
        &t,
        spheres,
        cfg,
        LoopSpec {
            stage: Stage::Finetune,
            epochs: cfg.stage2_epochs,
            base_lr: cfg.lr_stage2,
            recon_weight: 0.0,
            oc_weight: 1.0,
            params: range,
            layer_set: Some(&ls),
        },
    )
}

/// Optimizes `w_r·reconstruction + w_oc·objective` at `lr_stage1` for
/// `stage1_epochs`, starting from the given spheres.
pub fn train_joint(
    model: &mut Model,
    data: &[Sample],
    spheres: &mut [Hypersphere],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let t = prepare(model, data, cfg)?;
    let all = 0..model.params().len();
    run_loop(
        model,
        &t,
        spheres,
        cfg,
        LoopSpec {
            stage: Stage::Joint,
            epochs: cfg.stage1_epochs,
            base_lr: cfg.lr_stage1,
            recon_weight: cfg.joint_recon_weight,
            oc_weight: cfg.joint_oc_weight,
            params: all,
            layer_set: None,
        },
    )
}

/// Full pipeline for the configured regime.
pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let t = prepare(model, data, cfg)?;
    let ls = resolve_layer_set(model, cfg)?;
    let mut log = TrainLog::default();
    let mut spheres = match cfg.regime {
        Regime::TwoStage => {
            log.extend(pretrain_reconstruction(model, data, cfg)?);
            estimate_centroids(model, &t, &ls, cfg.nu, cfg.epsilon_guard, cfg.batch_size)?
        }
        Regime::Joint => estimate_centroids(model, &t, &ls, cfg.nu, cfg.epsilon_guard, cfg.batch_size)?,
    };
    match cfg.regime {
        Regime::TwoStage => log.extend(finetune_oneclass(model, data, &mut spheres, cfg)?),
        Regime::Joint => log.extend(train_joint(model, data, &mut spheres, cfg)?),
    }
    Ok(TrainOutcome { spheres, log })
}
