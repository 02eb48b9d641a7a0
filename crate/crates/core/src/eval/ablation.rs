use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::cdf::separation_gap;
use super::metrics::{max_balanced_accuracy, roc_auc};
use crate::data::{ids, labels, stack_images, Sample};
use crate::error::{Error, Result};
use crate::model::{build_autoencoder, AutoencoderSpec, SelectorSpec};
use crate::objective::{estimate_centroids, Hypersphere, LayerSet};
use crate::scoring::{score_batch, ScoreRecord};
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Auc,
    MaxBa,
}

/// Everything one ablation cell needs besides its subset and seed.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub arch: &'a AutoencoderSpec,
    pub selectors: &'a BTreeMap<usize, SelectorSpec>,
    pub cfg: &'a TrainConfig,
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layer_subset: LayerSet,
    /// Metric per seed, in seed order.
    pub values: Vec<f64>,
    pub seed_mean: f64,
    /// Population standard deviation over seeds.
    pub seed_std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn score_metric(records: &[ScoreRecord], labels: &[u8], metric: Metric) -> Result<f64> {
    let g: Vec<f64> = records.iter().map(|r| r.gamma).collect();
    match metric {
        Metric::Auc => Ok(roc_auc(&g, labels)?.0),
        Metric::MaxBa => Ok(max_balanced_accuracy(&g, labels)?.0),
    }
}

/// CDF separation gap of `τ_j` between normal and anomalous samples, per layer.
pub fn layer_separation(records: &[ScoreRecord], labels: &[u8]) -> Result<BTreeMap<usize, f64>> {
    let first = records.first().ok_or(Error::Empty("score records"))?;
    first
        .tau
        .keys()
        .map(|&j| {
            let pick = |want: u8| -> Vec<f64> {
                records
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == want)
                    .map(|(r, _)| r.tau[&j])
                    .collect()
            };
            Ok((j, separation_gap(&pick(0), &pick(1))?))
        })
        .collect()
}

/// Trains with `subset` and `seed` (model initialization and batch order)
/// and scores the test split with the same subset.
pub fn run_cell(setup: &AblationSetup<'_>, subset: &LayerSet, seed: u64) -> Result<(Vec<ScoreRecord>, f64)> {
    let cfg = TrainConfig {
        seed,
        layer_set: Some(subset.clone()),
        ..setup.cfg.clone()
    };
    let mut model = build_autoencoder(setup.arch, setup.selectors, seed)?;
    let outcome = train(&mut model, setup.train, &cfg)?;
    let images = stack_images(setup.test)?;
    let records = score_batch(&model, &outcome.spheres, &images, &ids(setup.test), cfg.boundary, cfg.batch_size)?;
    let m = score_metric(&records, &labels(setup.test), setup.metric)?;
    Ok((records, m))
}

/// Trains on `trained`, then scores `probed`. Layers outside `trained` get
/// centroids estimated on the training split after training, with radius 0.
pub fn run_cell_probed(
    setup: &AblationSetup<'_>,
    trained: &LayerSet,
    probed: &LayerSet,
    seed: u64,
) -> Result<Vec<ScoreRecord>> {
    let cfg = TrainConfig {
        seed,
        layer_set: Some(trained.clone()),
        ..setup.cfg.clone()
    };
    let mut model = build_autoencoder(setup.arch, setup.selectors, seed)?;
    let outcome = train(&mut model, setup.train, &cfg)?;
    let extra: Vec<usize> = probed.indices().filter(|&j| !trained.contains(j)).collect();
    let mut spheres: Vec<Hypersphere> = outcome
        .spheres
        .into_iter()
        .filter(|s| probed.contains(s.layer_index))
        .collect();
    if !extra.is_empty() {
        let train_images = stack_images(setup.train)?;
        spheres.extend(estimate_centroids(
            &model,
            &train_images,
            &LayerSet::new(extra)?,
            cfg.nu,
            cfg.epsilon_guard,
            cfg.batch_size,
        )?);
    }
    spheres.sort_by_key(|s| s.layer_index);
    let images = stack_images(setup.test)?;
    score_batch(&model, &spheres, &images, &ids(setup.test), cfg.boundary, cfg.batch_size)
}

/// One row per subset (declaration order) with the metric over `seeds`.
/// Cells run on up to `threads` workers; results do not depend on it.
pub fn ablation_sweep(
    setup: &AblationSetup<'_>,
    subsets: &[LayerSet],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    if subsets.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("ablation subsets or seeds"));
    }
    let cells: Vec<(usize, u64)> = (0..subsets.len())
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= cells.len() {
                    break;
                }
                let (s, seed) = cells[k];
                let r = run_cell(setup, &subsets[s], seed).map(|(_, m)| m);
                results.lock().unwrap()[k] = Some(r);
            });
        }
    });
    let results = results.into_inner().unwrap();
    let mut rows = Vec::with_capacity(subsets.len());
    let mut it = results.into_iter();
    for subset in subsets {
        let values = (0..seeds.len())
            .map(|_| it.next().flatten().expect("every cell ran"))
            .collect::<Result<Vec<f64>>>()?;
        let (seed_mean, seed_std) = mean_std(&values);
        rows.push(AblationRow {
            layer_subset: subset.clone(),
            values,
            seed_mean,
            seed_std,
        });
    }
    Ok(rows)
}

/// `subset,mean,std`, subsets written as space-separated indices.
pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["subset", "mean", "std"])?;
    for r in rows {
        let subset = r.layer_subset.to_vec().iter().map(|j| j.to_string()).collect::<Vec<_>>().join(" ");
        wr.write_record([subset, format!("{:.12}", r.seed_mean), format!("{:.12}", r.seed_std)])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
