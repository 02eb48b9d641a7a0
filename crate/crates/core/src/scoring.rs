//! Inference-time anomaly scores.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{batches, BoundaryMode, Hypersphere};

pub const DEFAULT_RECON_WEIGHT: f64 = 1.0;

/// Per-sample layer distances and the combined score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub tau: BTreeMap<usize, f64>,
    pub gamma: f64,
    pub mode: BoundaryMode,
}

/// Frame-score normalization over the clips containing a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Eq8Variant {
    /// `(mean − max) / (max − min)`.
    #[default]
    Printed,
    /// `(mean − min) / (max − min)`.
    Minmax,
}

impl std::str::FromStr for Eq8Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(Self::Printed),
            "minmax" => Ok(Self::Minmax),
            _ => Err(Error::invalid(format!("eq8 variant must be printed or minmax, got {s:?}"))),
        }
    }
}

/// `‖feature − c‖²`, accumulated in `f64`.
pub fn layer_distance(feature: &[f32], sphere: &Hypersphere) -> Result<f64> {
    if feature.len() != sphere.dim() {
        return Err(Error::shape(
            "layer_distance",
            format!(
                "feature dim {} vs centroid dim {} (layer {})",
                feature.len(),
                sphere.dim(),
                sphere.layer_index
            ),
        ));
    }
    Ok(feature
        .iter()
        .zip(&sphere.centroid)
        .map(|(&a, &c)| {
            let e = a as f64 - c as f64;
            e * e
        })
        .sum())
}

/// Mean of `τ_j` (hard) or of `τ_j − R_j²` (soft) over the layers.
pub fn anomaly_score(
    taus: &BTreeMap<usize, f64>,
    spheres: &BTreeMap<usize, Hypersphere>,
    mode: BoundaryMode,
) -> Result<f64> {
    if taus.is_empty() {
        return Err(Error::Empty("layer distances"));
    }
    if taus.len() != spheres.len() || taus.keys().any(|j| !spheres.contains_key(j)) {
        return Err(Error::invalid(format!(
            "layer sets differ: distances for {:?}, spheres for {:?}",
            taus.keys().collect::<Vec<_>>(),
            spheres.keys().collect::<Vec<_>>()
        )));
    }
    let sum: f64 = taus
        .iter()
        .map(|(j, &t)| match mode {
            BoundaryMode::Hard => t,
            BoundaryMode::Soft => t - spheres[j].radius_sq as f64,
        })
        .sum();
    Ok(sum / taus.len() as f64)
}

/// Maximum over patch scores.
pub fn patch_score(patch_gammas: &[f64]) -> Result<f64> {
    patch_gammas
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::Empty("patch scores"))
}

/// Normalized score of one frame from the scores of every clip containing it.
/// A window with `max == min` scores 0.
pub fn frame_score(per_clip_gammas: &[f64], variant: Eq8Variant) -> f64 {
    if per_clip_gammas.is_empty() {
        return 0.0;
    }
    let max = per_clip_gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_clip_gammas.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return 0.0;
    }
    let mean = per_clip_gammas.iter().sum::<f64>() / per_clip_gammas.len() as f64;
    match variant {
        Eq8Variant::Printed => (mean - max) / (max - min),
        Eq8Variant::Minmax => (mean - min) / (max - min),
    }
}

pub fn add_reconstruction_term(gamma: f64, recon_error: f64, weight: f64) -> f64 {
    gamma + weight * recon_error
}

pub fn sphere_map(spheres: &[Hypersphere]) -> BTreeMap<usize, Hypersphere> {
    spheres.iter().map(|s| (s.layer_index, s.clone())).collect()
}

/// Scores every sample of `images` (`[N, H, W, C]`) against `spheres`.
pub fn score_batch(
    model: &Model,
    spheres: &[Hypersphere],
    images: &Tensor,
    ids: &[String],
    mode: BoundaryMode,
    batch_size: usize,
) -> Result<Vec<ScoreRecord>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if ids.len() != n {
        return Err(Error::invalid(format!("{} ids for {n} samples", ids.len())));
    }
    let smap = sphere_map(spheres);
    let mut out = Vec::with_capacity(n);
    let mut id_iter = ids.iter();
    for chunk in batches(images, batch_size.max(1)) {
        let feats = model.tap_features(&chunk)?;
        let m = chunk.shape()[0];
        for i in 0..m {
            let mut tau = BTreeMap::new();
            for (j, s) in &smap {
                let f = feats.get(j).ok_or_else(|| {
                    Error::invalid(format!("model has no tapped layer {j} for the stored sphere"))
                })?;
                let d = f.shape()[1];
                tau.insert(*j, layer_distance(&f.data()[i * d..(i + 1) * d], s)?);
            }
            let gamma = anomaly_score(&tau, &smap, mode)?;
            out.push(ScoreRecord {
                sample_id: id_iter.next().unwrap().clone(),
                tau,
                gamma,
                mode,
            });
        }
    }
    Ok(out)
}

/// Per-sample mean squared reconstruction error.
pub fn reconstruction_errors(model: &Model, images: &Tensor, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in batches(images, batch_size.max(1)) {
        let y = model.reconstruct(&chunk)?;
        let per = chunk.numel() / chunk.shape()[0];
        for (a, b) in chunk.data().chunks_exact(per).zip(y.data().chunks_exact(per)) {
            let se: f64 = a.iter().zip(b).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum();
            out.push(se / per as f64);
        }
    }
    Ok(out)
}

/// Writes `sample_id,gamma,tau_<j>...` with 9 significant digits.
pub fn write_scores_csv<W: Write>(w: W, records: &[ScoreRecord]) -> Result<()> {
    let layers: Vec<usize> = records
        .first()
        .map(|r| r.tau.keys().copied().collect())
        .unwrap_or_default();
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["sample_id".to_string(), "gamma".to_string()];
    header.extend(layers.iter().map(|j| format!("tau_{j}")));
    wr.write_record(&header)?;
    for r in records {
        let mut row = vec![r.sample_id.clone(), fmt_sig9(r.gamma)];
        for j in &layers {
            let t = r.tau.get(j).ok_or_else(|| {
                Error::invalid(format!("record {} lacks layer {j}", r.sample_id))
            })?;
            row.push(fmt_sig9(*t));
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Scientific notation with 9 significant digits.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Reads a scores CSV back as `(sample_id, gamma, taus)`.
pub fn read_scores_csv<R: std::io::Read>(r: R) -> Result<Vec<(String, f64, BTreeMap<usize, f64>)>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.get(0) != Some("sample_id") || header.get(1) != Some("gamma") {
        return Err(Error::invalid("scores header must start with sample_id,gamma"));
    }
    let mut layers = Vec::new();
    for h in header.iter().skip(2) {
        let j = h
            .strip_prefix("tau_")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::invalid(format!("bad score column {h:?}")))?;
        layers.push(j);
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad score value {s:?}")))
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let mut taus = BTreeMap::new();
        for (k, j) in layers.iter().enumerate() {
            taus.insert(*j, parse(&rec[k + 2])?);
        }
        out.push((rec[0].to_string(), parse(&rec[1])?, taus));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spheres(r: &[(usize, f32)]) -> BTreeMap<usize, Hypersphere> {
        r.iter()
            .map(|&(j, r2)| (j, Hypersphere::new(j, vec![0.0], r2, 0.1).unwrap()))
            .collect()
    }

    #[test]
    fn distance_fixtures() {
        let s = Hypersphere::new(0, vec![0.0, 0.0], 0.0, 0.1).unwrap();
        assert_eq!(layer_distance(&[3.0, 4.0], &s).unwrap(), 25.0);
        let s2 = Hypersphere::new(0, vec![3.0, 4.0], 0.0, 0.1).unwrap();
        assert_eq!(layer_distance(&[3.0, 4.0], &s2).unwrap(), 0.0);
        assert!(layer_distance(&[1.0], &s).is_err());
    }

    #[test]
    fn anomaly_score_fixtures() {
        let taus: BTreeMap<usize, f64> = [(5, 1.0), (6, 3.0)].into();
        let sp = spheres(&[(5, 0.5), (6, 1.0)]);
        assert_eq!(anomaly_score(&taus, &sp, BoundaryMode::Hard).unwrap(), 2.0);
        assert!((anomaly_score(&taus, &sp, BoundaryMode::Soft).unwrap() - 1.25).abs() < 1e-12);
        let at_boundary: BTreeMap<usize, f64> = [(5, 0.5), (6, 1.0)].into();
        assert_eq!(anomaly_score(&at_boundary, &sp, BoundaryMode::Soft).unwrap(), 0.0);
        let other = spheres(&[(4, 0.5), (6, 1.0)]);
        assert!(anomaly_score(&taus, &other, BoundaryMode::Hard).is_err());
    }

    #[test]
    fn patch_and_frame_fixtures() {
        assert_eq!(patch_score(&[0.1, 0.9, 0.5]).unwrap(), 0.9);
        assert_eq!(patch_score(&[0.3; 4]).unwrap(), 0.3);
        assert!(patch_score(&[]).is_err());
        assert!((frame_score(&[0.2, 0.4, 0.6], Eq8Variant::Printed) + 0.5).abs() < 1e-9);
        assert!((frame_score(&[0.2, 0.4, 0.6], Eq8Variant::Minmax) - 0.5).abs() < 1e-9);
        assert_eq!(frame_score(&[0.7], Eq8Variant::Printed), 0.0);
        assert_eq!(frame_score(&[1.5; 3], Eq8Variant::Minmax), 0.0);
        assert_eq!(add_reconstruction_term(1.0, 0.5, 2.0), 2.0);
        assert_eq!(add_reconstruction_term(1.0, 0.5, 0.0), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let rec = ScoreRecord {
            sample_id: "a".into(),
            tau: [(1, 0.123456789123), (3, 2.0)].into(),
            gamma: 1.0 / 3.0,
            mode: BoundaryMode::Hard,
        };
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,gamma,tau_1,tau_3\n"), "{text}");
        assert!(text.contains("3.33333333e-1"), "{text}");
        let back = read_scores_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "a");
        assert!((back[0].1 - 1.0 / 3.0).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn hard_score_is_monotone(t in prop::collection::vec(0.0f64..10.0, 1..6), k in 0usize..6, bump in 1e-3f64..1.0) {
            let taus: BTreeMap<usize, f64> = t.iter().copied().enumerate().collect();
            let sp = spheres(&(0..t.len()).map(|j| (j, 0.0)).collect::<Vec<_>>());
            let base = anomaly_score(&taus, &sp, BoundaryMode::Hard).unwrap();
            let mut up = taus.clone();
            *up.get_mut(&(k % t.len())).unwrap() += bump;
            prop_assert!(anomaly_score(&up, &sp, BoundaryMode::Hard).unwrap() > base);
        }

        #[test]
        fn soft_is_shifted_hard(t in prop::collection::vec(0.0f64..10.0, 1..6), r in prop::collection::vec(0.0f32..5.0, 6)) {
            let taus: BTreeMap<usize, f64> = t.iter().copied().enumerate().collect();
            let sp = spheres(&(0..t.len()).map(|j| (j, r[j])).collect::<Vec<_>>());
            let shift = (0..t.len()).map(|j| r[j] as f64).sum::<f64>() / t.len() as f64;
            let h = anomaly_score(&taus, &sp, BoundaryMode::Hard).unwrap();
            let s = anomaly_score(&taus, &sp, BoundaryMode::Soft).unwrap();
            prop_assert!((h - shift - s).abs() < 1e-9);
        }

        #[test]
        fn patch_score_permutation_invariant(mut v in prop::collection::vec(-5.0f64..5.0, 1..64), seed in any::<u64>()) {
            let a = patch_score(&v).unwrap();
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            v.reverse();
            prop_assert_eq!(a, patch_score(&v).unwrap());
        }
    }
}
