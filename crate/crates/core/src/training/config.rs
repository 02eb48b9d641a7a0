use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{BoundaryMode, LayerSet, DEFAULT_EPSILON_GUARD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Reconstruction pretraining, centroid estimation, encoder fine-tuning.
    #[default]
    TwoStage,
    /// Reconstruction and one-class objectives optimized together.
    Joint,
}

/// Where soft-boundary radii are re-estimated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RadiusSource {
    /// The current mini-batch.
    #[default]
    Batch,
    /// Inference-mode features of the whole training set.
    TrainSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr_stage1: f32,
    pub lr_stage2: f32,
    pub nu: f32,
    pub lambda: f32,
    pub boundary: BoundaryMode,
    /// Layers entering the objective; `None` uses every tapped layer.
    pub layer_set: Option<LayerSet>,
    /// Optimizer steps between radius updates; `None` is five epochs' worth.
    pub radius_update_every: Option<usize>,
    pub radius_source: RadiusSource,
    pub seed: u64,
    /// Epochs (counted from the start of a stage) at which the learning
    /// rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f32,
    pub epsilon_guard: f32,
    pub joint_recon_weight: f32,
    pub joint_oc_weight: f32,
    pub collapse_threshold: f64,
    /// Re-estimate centroids every this many stage-2 epochs (off when `None`).
    pub centroid_reestimate_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::TwoStage,
            stage1_epochs: 20,
            stage2_epochs: 20,
            batch_size: 256,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            nu: 0.1,
            lambda: 1e-6,
            boundary: BoundaryMode::Soft,
            layer_set: None,
            radius_update_every: None,
            radius_source: RadiusSource::Batch,
            seed: 0,
            lr_drop_epochs: Vec::new(),
            lr_drop_factor: 0.1,
            epsilon_guard: DEFAULT_EPSILON_GUARD,
            joint_recon_weight: 1.0,
            joint_oc_weight: 1.0,
            collapse_threshold: 1e-8,
            centroid_reestimate_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_stage1 > 0.0) || !(self.lr_stage2 > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return bad(format!("nu must lie in (0, 1], got {}", self.nu));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.radius_update_every == Some(0) || self.centroid_reestimate_every == Some(0) {
            return bad("update intervals must be positive".into());
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_factor must be positive".into());
        }
        if !(self.epsilon_guard >= 0.0) {
            return bad("epsilon_guard must be >= 0".into());
        }
        if !(self.joint_recon_weight >= 0.0) || !(self.joint_oc_weight >= 0.0) {
            return bad("joint weights must be >= 0".into());
        }
        Ok(())
    }

    /// Learning rate for `epoch` of a stage starting at `base`.
    pub fn lr_at(&self, base: f32, epoch: usize) -> f32 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        base * self.lr_drop_factor.powi(drops as i32)
    }

    /// Steps between radius updates for `n` training samples.
    pub fn radius_interval(&self, n: usize) -> usize {
        self.radius_update_every
            .unwrap_or_else(|| 5 * n.div_ceil(self.batch_size))
            .max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.radius_interval(1000), 20);
    }

    #[test]
    fn lr_drops_at_listed_epochs() {
        let c = TrainConfig {
            lr_drop_epochs: vec![3, 5],
            ..Default::default()
        };
        assert_eq!(c.lr_at(1.0, 2), 1.0);
        assert!((c.lr_at(1.0, 3) - 0.1).abs() < 1e-7);
        assert!((c.lr_at(1.0, 6) - 0.01).abs() < 1e-7);
    }

    #[test]
    fn invalid_values_rejected() {
        for c in [
            TrainConfig { nu: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
