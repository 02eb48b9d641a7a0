//! The TOML run configuration shared by every verb.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use mocca_core::data::synthetic::SyntheticConfig;
use mocca_core::data::Preprocess;
use mocca_core::eval::Metric;
use mocca_core::model::{AutoencoderSpec, Preset, PresetParams, SelectorKind, SelectorSpec};
use mocca_core::objective::LayerSet;
use mocca_core::scoring::{Eq8Variant, DEFAULT_RECON_WEIGHT};
use mocca_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Default for `--out`; relative paths resolve against the config file's directory.
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub ablation: AblationConfig,
    /// Dataset emitted by `mocca synth`.
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: Option<PathBuf>,
    pub channels: usize,
    pub preprocess: Preprocess,
    /// Rotated copies appended to the training split.
    pub rotation: Option<RotationConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            channels: 3,
            preprocess: Preprocess::None,
            rotation: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationConfig {
    pub lo_rad: f64,
    pub hi_rad: f64,
    /// Copies per training image, each at its own random angle.
    pub copies: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub input_shape: Vec<usize>,
    pub base_width: usize,
    pub code_size: usize,
    pub kernel: usize,
    pub residual_blocks: usize,
    /// Selector used on every tapped layer without an entry in `selectors`.
    pub selector_kind: SelectorKind,
    pub selectors: Vec<SelectorEntry>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PresetParams::default();
        Self {
            preset: Preset::LenetLike,
            input_shape: vec![32, 32, 3],
            base_width: p.base_width,
            code_size: p.code_size,
            kernel: p.kernel,
            residual_blocks: p.residual_blocks,
            selector_kind: SelectorKind::AvgPool,
            selectors: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorEntry {
    pub layer: usize,
    pub kind: SelectorKind,
    pub output_dim: usize,
}

impl ModelConfig {
    pub fn architecture(&self) -> Result<(AutoencoderSpec, BTreeMap<usize, SelectorSpec>)> {
        let params = PresetParams {
            base_width: self.base_width,
            code_size: self.code_size,
            kernel: self.kernel,
            residual_blocks: self.residual_blocks,
        };
        let arch = self.preset.build(&self.input_shape, &params)?;
        let mut selectors = arch.uniform_selectors(self.selector_kind)?;
        for e in &self.selectors {
            let slot = selectors
                .get_mut(&e.layer)
                .with_context(|| format!("model.selectors: layer {} is not tapped", e.layer))?;
            *slot = SelectorSpec {
                kind: e.kind,
                output_dim: e.output_dim,
            };
        }
        Ok((arch, selectors))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub eq8_variant: Eq8Variant,
    /// Weight of the reconstruction term in sequence mode.
    pub recon_weight: f64,
    /// Score images as the maximum over non-overlapping patches.
    pub patch: bool,
    /// Side length images are resized to before patching.
    pub patch_resize: usize,
    /// Score frames of image sequences through sliding clips.
    pub seq: bool,
    pub clip_len: usize,
    /// Subtract each video's median frame before scoring.
    pub background_subtraction: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            eq8_variant: Eq8Variant::Printed,
            recon_weight: DEFAULT_RECON_WEIGHT,
            patch: false,
            patch_resize: 512,
            seq: false,
            clip_len: mocca_core::data::DEFAULT_CLIP_LEN,
            background_subtraction: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Empty means the last one, two and three tapped layers.
    pub subsets: Vec<LayerSet>,
    pub seeds: Vec<u64>,
    pub metric: Metric,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            subsets: Vec::new(),
            seeds: vec![0],
            metric: Metric::Auc,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        Ok(cfg)
    }

    /// Reads `path`, returning the parsed config and its verbatim text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("config {}", path.display()))?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.manifest, &mut cfg.output_dir].into_iter().flatten() {
                if p.is_relative() {
                    *p = resolve(dir, p);
                }
            }
        }
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !matches!(self.data.channels, 1 | 3) {
            bail!("data.channels must be 1 or 3, got {}", self.data.channels);
        }
        if self.model.input_shape.len() != 3 || self.model.input_shape[2] != self.data.channels {
            bail!(
                "model.input_shape {:?} must be [H, W, {}]",
                self.model.input_shape,
                self.data.channels
            );
        }
        if let Some(r) = &self.data.rotation {
            if !(r.lo_rad <= r.hi_rad) {
                bail!("data.rotation: lo_rad must not exceed hi_rad");
            }
        }
        if !(self.score.recon_weight >= 0.0) {
            bail!("score.recon_weight must be >= 0");
        }
        if self.score.patch && self.score.seq {
            bail!("score.patch and score.seq are exclusive");
        }
        if self.score.clip_len == 0 {
            bail!("score.clip_len must be positive");
        }
        if self.ablation.seeds.is_empty() {
            bail!("ablation.seeds must not be empty");
        }
        let (arch, selectors) = self.model.architecture()?;
        mocca_core::model::build_autoencoder(&arch, &selectors, self.train.seed)?;
        if let Some(ls) = &self.train.layer_set {
            check_layers(ls, &arch)?;
        }
        for s in &self.ablation.subsets {
            check_layers(s, &arch)?;
        }
        Ok(())
    }

    /// Ablation subsets, defaulting to the last one, two and three taps.
    pub fn ablation_subsets(&self) -> Result<Vec<LayerSet>> {
        if !self.ablation.subsets.is_empty() {
            return Ok(self.ablation.subsets.clone());
        }
        let (arch, _) = self.model.architecture()?;
        let taps = arch.tapped_layers();
        (1..=taps.len().min(3))
            .map(|k| Ok(LayerSet::new(taps[taps.len() - k..].iter().copied())?))
            .collect()
    }
}

/// `dir/rel` made absolute, with `.` and `..` folded away lexically.
fn resolve(dir: &Path, rel: &Path) -> PathBuf {
    let joined = dir.join(rel);
    let abs = std::path::absolute(&joined).unwrap_or(joined);
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            c => out.push(c),
        }
    }
    out
}

fn check_layers(ls: &LayerSet, arch: &AutoencoderSpec) -> Result<()> {
    let taps = arch.tapped_layers();
    if let Some(j) = ls.indices().find(|j| !taps.contains(j)) {
        bail!("layer {j} is not a tapped layer (tapped: {taps:?})");
    }
    Ok(())
}
