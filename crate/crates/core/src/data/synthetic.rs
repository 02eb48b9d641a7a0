//! Seeded 16×16 grayscale one-class datasets with controllable anomalies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// A Gaussian blob near the image center.
    Blobs,
    /// Oriented sinusoidal gratings.
    Textures,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyDepth {
    /// Fine-grained statistics change: extra pixel-level noise.
    Lowlevel,
    /// Global structure changes: displaced blob or a flat defect region.
    Highlevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub depth: AnomalyDepth,
    pub size: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Standard deviation of the per-pixel noise every sample carries.
    pub base_noise: f32,
    /// Half-width of the uniform noise added to lowlevel anomalies.
    pub lowlevel_amplitude: f32,
    /// Distance (pixels, per axis) a highlevel blob moves toward a corner.
    pub highlevel_shift: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Blobs,
            depth: AnomalyDepth::Highlevel,
            size: 16,
            n_train: 512,
            n_test_normal: 200,
            n_test_anomalous: 200,
            base_noise: 0.02,
            lowlevel_amplitude: 0.1,
            highlevel_shift: 4.5,
            seed: 0,
        }
    }
}

/// Normal-only training split and a labelled test split.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shorthand for [`generate`] with default sizes.
pub fn synthetic_oneclass(
    kind: SyntheticKind,
    n_normal: usize,
    n_anomalous: usize,
    depth: AnomalyDepth,
    seed: u64,
) -> Result<SyntheticSplit> {
    generate(&SyntheticConfig {
        kind,
        depth,
        n_train: n_normal,
        n_test_normal: n_anomalous,
        n_test_anomalous: n_anomalous,
        seed,
        ..Default::default()
    })
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticSplit> {
    if cfg.n_train == 0 || cfg.n_test_normal == 0 || cfg.n_test_anomalous == 0 {
        return Err(Error::invalid("synthetic sample counts must be positive"));
    }
    if cfg.size < 8 {
        return Err(Error::invalid(format!("synthetic size {} is below 8", cfg.size)));
    }
    if !(cfg.base_noise >= 0.0 && cfg.lowlevel_amplitude >= 0.0 && cfg.highlevel_shift >= 0.0) {
        return Err(Error::invalid("synthetic noise and shift settings must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |prefix: &str, n: usize, anomalous: bool| -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("{prefix}_{i:05}"),
                image: render(cfg, anomalous, &mut rng),
                label: anomalous as u8,
            })
            .collect()
    };
    let train = make("train", cfg.n_train, false);
    let mut test = make("test_normal", cfg.n_test_normal, false);
    test.extend(make("test_anomalous", cfg.n_test_anomalous, true));
    Ok(SyntheticSplit { train, test })
}

fn render(cfg: &SyntheticConfig, anomalous: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let s = cfg.size;
    let mid = (s as f32 - 1.0) / 2.0;
    let mut px = vec![0.0f32; s * s];
    match cfg.kind {
        SyntheticKind::Blobs => {
            let (mut cy, mut cx) = (mid + rng.gen_range(-1.0..1.0), mid + rng.gen_range(-1.0..1.0));
            if anomalous && cfg.depth == AnomalyDepth::Highlevel {
                let sy = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let sx = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                cy += sy * cfg.highlevel_shift;
                cx += sx * cfg.highlevel_shift;
            }
            let sigma: f32 = rng.gen_range(2.0..3.0);
            let amp: f32 = rng.gen_range(0.6..0.9);
            for y in 0..s {
                for x in 0..s {
                    let r2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    px[y * s + x] = 0.1 + amp * (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        SyntheticKind::Textures => {
            let freq: f32 = rng.gen_range(0.12..0.18);
            let theta: f32 = rng.gen_range(-0.2..0.2);
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (st, ct) = theta.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    let u = x as f32 * ct + y as f32 * st;
                    px[y * s + x] = 0.5 + 0.3 * (std::f32::consts::TAU * freq * u + phase).sin();
                }
            }
            if anomalous && cfg.depth == AnomalyDepth::Highlevel {
                let k = s / 3;
                let (y0, x0) = (rng.gen_range(0..=s - k), rng.gen_range(0..=s - k));
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        px[y * s + x] = 0.5;
                    }
                }
            }
        }
    }
    if cfg.base_noise > 0.0 {
        let normal = Normal::new(0.0f32, cfg.base_noise).unwrap();
        px.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    if anomalous && cfg.depth == AnomalyDepth::Lowlevel && cfg.lowlevel_amplitude > 0.0 {
        let a = cfg.lowlevel_amplitude;
        px.iter_mut().for_each(|v| *v += rng.gen_range(-a..=a));
    }
    // 8-bit levels so PNG export round-trips exactly
    let data = px
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Tensor::from_parts(vec![s, s, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_image(samples: &[&Sample]) -> Vec<f64> {
        let mut acc = vec![0.0; samples[0].image.numel()];
        for s in samples {
            acc.iter_mut().zip(s.image.data()).for_each(|(a, &v)| *a += v as f64);
        }
        acc.iter().map(|a| a / samples.len() as f64).collect()
    }

    #[test]
    fn reproducible_and_train_is_normal() {
        let a = synthetic_oneclass(SyntheticKind::Blobs, 20, 10, AnomalyDepth::Lowlevel, 3).unwrap();
        let b = synthetic_oneclass(SyntheticKind::Blobs, 20, 10, AnomalyDepth::Lowlevel, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.train.iter().all(|s| s.label == 0));
        assert_eq!(a.test.iter().filter(|s| s.label == 1).count(), 10);
        let c = synthetic_oneclass(SyntheticKind::Blobs, 20, 10, AnomalyDepth::Lowlevel, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn highlevel_means_differ() {
        for kind in [SyntheticKind::Blobs, SyntheticKind::Textures] {
            let d = synthetic_oneclass(kind, 10, 100, AnomalyDepth::Highlevel, 1).unwrap();
            let norm: Vec<&Sample> = d.test.iter().filter(|s| s.label == 0).collect();
            let anom: Vec<&Sample> = d.test.iter().filter(|s| s.label == 1).collect();
            let (mn, ma) = (mean_image(&norm), mean_image(&anom));
            let diff: f64 = mn.iter().zip(&ma).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1.0, "{kind:?}: {diff}");
        }
    }

    #[test]
    fn values_are_eight_bit_levels() {
        let d = synthetic_oneclass(SyntheticKind::Textures, 4, 4, AnomalyDepth::Lowlevel, 9).unwrap();
        for s in d.train.iter().chain(&d.test) {
            for &v in s.image.data() {
                let q = v * 255.0;
                assert!((q - q.round()).abs() < 1e-3 && (0.0..=1.0).contains(&v));
            }
        }
    }
}
