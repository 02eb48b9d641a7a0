//! One function per verb. Each validates all inputs before touching the
//! output directory, then writes every file in one pass.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mocca_core::data::synthetic::generate;
use mocca_core::data::{
    ensure_normal_only, export_dataset, extract_patches, group_videos, ids, make_clips, random_rotation, resize,
    stack_images, subtract_median_background, Manifest, Sample, Split,
};
use mocca_core::diffcore::Tensor;
use mocca_core::eval::{
    ablation_sweep, cdf_export, evaluate, layer_separation, write_ablation_csv, write_cdf_csv, write_roc_csv,
    write_summary_csv, AblationSetup,
};
use mocca_core::model::build_autoencoder;
use mocca_core::objective::{BoundaryMode, LayerSet};
use mocca_core::scoring::{
    add_reconstruction_term, frame_score, patch_score, read_scores_csv, reconstruction_errors, score_batch,
    write_scores_csv, Eq8Variant, ScoreRecord,
};
use mocca_core::training::{restore, to_bytes, train as train_model, Checkpoint};
use mocca_core::verify::{operator_suite, OperatorCheck, SuiteConfig};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.mocc";

/// Files to write, relative to an output directory.
#[derive(Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, rel: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.0.push((rel.into(), bytes.into()));
    }

    fn csv(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> mocca_core::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.add(rel, buf);
        Ok(())
    }

    fn commit(self, dir: &Path) -> Result<()> {
        for (rel, bytes) in self.0 {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

/// Overrides shared by `train` and `ablate`.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub boundary: Option<BoundaryMode>,
    pub layers: Option<LayerSet>,
    pub seed: Option<u64>,
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.manifest.clone())
        .context("no manifest: pass --manifest or set data.manifest")
}

fn load_split(manifest: &Path, split: Split, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let m = Manifest::read(manifest)?;
    let samples = m.load(split, cfg.data.channels, &cfg.data.preprocess)?;
    ensure!(!samples.is_empty(), "manifest {} has no {split} records", manifest.display());
    Ok(samples)
}

fn load_training(manifest: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut train = load_split(manifest, Split::Train, cfg)?;
    ensure_normal_only(&train)?;
    if let Some(r) = &cfg.data.rotation {
        let originals = train.clone();
        for copy in 0..r.copies {
            for (i, s) in originals.iter().enumerate() {
                let seed = cfg.train.seed ^ ((copy as u64) << 32 | i as u64);
                train.push(Sample {
                    id: format!("{}#rot{copy}", s.id),
                    image: random_rotation(&s.image, r.lo_rad, r.hi_rad, seed)?,
                    label: 0,
                });
            }
        }
    }
    Ok(train)
}

fn apply_train_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(b) = o.boundary {
        cfg.train.boundary = b;
    }
    if let Some(l) = &o.layers {
        cfg.train.layer_set = Some(l.clone());
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = &o.manifest {
        cfg.data.manifest = Some(m.clone());
    }
}

fn config_files(out: &mut Outputs, cfg: &RunConfig, input_text: &str) -> Result<()> {
    out.add("config.toml", cfg.to_toml()?);
    out.add("config.input.toml", input_text);
    Ok(())
}

/// Trains per the config and writes the checkpoint, logs and configs.
pub fn train(config: &Path, o: &TrainOverrides) -> Result<PathBuf> {
    let (mut cfg, text) = RunConfig::load(config)?;
    apply_train_overrides(&mut cfg, o);
    cfg.validate()?;
    let dir = out_dir(&o.out, &cfg)?;
    let manifest = manifest_path(&None, &cfg)?;
    let data = load_training(&manifest, &cfg)?;

    let (arch, selectors) = cfg.model.architecture()?;
    let mut model = build_autoencoder(&arch, &selectors, cfg.train.seed)?;
    let outcome = train_model(&mut model, &data, &cfg.train)?;

    let mut out = Outputs::default();
    out.add(CHECKPOINT_FILE, to_bytes(&model, &outcome.spheres, &cfg.train)?);
    out.csv("train_log.csv", |w| outcome.log.write_csv(w))?;
    out.csv("radius_log.csv", |w| outcome.log.write_radius_csv(w))?;
    config_files(&mut out, &cfg, &text)?;
    out.commit(&dir)?;
    Ok(dir)
}

#[derive(Clone, Debug, Default)]
pub struct ScoreArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<Split>,
    pub boundary: Option<BoundaryMode>,
    pub layers: Option<LayerSet>,
    pub patch: bool,
    pub seq: bool,
    pub eq8_variant: Option<Eq8Variant>,
    pub recon_weight: Option<f64>,
}

/// Scores one manifest split with a checkpoint and writes `scores.csv`.
pub fn score(a: &ScoreArgs) -> Result<PathBuf> {
    let (mut cfg, _) = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), String::new()),
    };
    let ck = restore(&a.checkpoint)?;
    cfg.data.channels = ck.model.spec().input_shape[2];
    if a.patch {
        cfg.score.patch = true;
    }
    if a.seq {
        cfg.score.seq = true;
    }
    if let Some(v) = a.eq8_variant {
        cfg.score.eq8_variant = v;
    }
    if let Some(w) = a.recon_weight {
        cfg.score.recon_weight = w;
    }
    ensure!(cfg.score.recon_weight >= 0.0, "recon weight must be >= 0");
    ensure!(!(cfg.score.patch && cfg.score.seq), "--patch and --seq are exclusive");
    if let Some(l) = &a.layers {
        let stored = ck.layer_set();
        ensure!(
            *l == stored,
            "requested layers {l} differ from the checkpoint's trained layers {stored}"
        );
    }
    let mode = a.boundary.unwrap_or(ck.boundary());
    let dir = out_dir(&a.out, &cfg)?;
    let manifest = manifest_path(&a.manifest, &cfg)?;
    let samples = load_split(&manifest, a.split.unwrap_or(Split::Test), &cfg)?;

    let records = if cfg.score.patch {
        score_patches(&ck, &samples, mode, &cfg)?
    } else if cfg.score.seq {
        score_sequences(&ck, samples, mode, &cfg)?
    } else {
        score_batch(
            &ck.model,
            &ck.spheres,
            &stack_images(&samples)?,
            &ids(&samples),
            mode,
            ck.config.batch_size,
        )?
    };
    let mut out = Outputs::default();
    out.csv("scores.csv", |w| write_scores_csv(w, &records))?;
    out.commit(&dir)?;
    Ok(dir)
}

/// Maximum γ over the patch grid of each resized image; τ columns are
/// those of the maximizing patch.
fn score_patches(ck: &Checkpoint, samples: &[Sample], mode: BoundaryMode, cfg: &RunConfig) -> Result<Vec<ScoreRecord>> {
    let shape = &ck.model.spec().input_shape;
    ensure!(shape[0] == shape[1], "patch mode needs a square model input, got {shape:?}");
    let side = cfg.score.patch_resize;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let img = if s.image.shape()[..2] == [side, side] {
            s.image.clone()
        } else {
            resize(&s.image, side, side)?
        };
        let grid = extract_patches(&s.id, &img, shape[0])?;
        let ids: Vec<String> = (0..grid.patches.len()).map(|k| format!("{}#{k}", s.id)).collect();
        let recs = score_batch(
            &ck.model,
            &ck.spheres,
            &Tensor::stack(&grid.patches.iter().collect::<Vec<_>>())?,
            &ids,
            mode,
            ck.config.batch_size,
        )?;
        let gammas: Vec<f64> = recs.iter().map(|r| r.gamma).collect();
        let best = patch_score(&gammas)?;
        let arg = gammas.iter().position(|&g| g == best).unwrap();
        out.push(ScoreRecord {
            sample_id: s.id.clone(),
            tau: recs[arg].tau.clone(),
            gamma: best,
            mode,
        });
    }
    Ok(out)
}

/// Frames grouped into videos by directory. Each clip scores the mean γ of
/// its frames; a frame's score normalizes the scores of its clips and adds
/// the weighted reconstruction error of the frame itself.
fn score_sequences(ck: &Checkpoint, samples: Vec<Sample>, mode: BoundaryMode, cfg: &RunConfig) -> Result<Vec<ScoreRecord>> {
    let w = cfg.score.recon_weight;
    if w > 0.0 && !ck.model.has_decoder() {
        bail!("checkpoint has no decoder; sequence scoring needs --recon-weight 0");
    }
    let mut out = Vec::with_capacity(samples.len());
    for (video, mut frames) in group_videos(samples) {
        if cfg.score.background_subtraction {
            let imgs: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
            for (f, img) in frames.iter_mut().zip(subtract_median_background(&imgs)?) {
                f.image = img;
            }
        }
        let images = stack_images(&frames)?;
        let recs = score_batch(&ck.model, &ck.spheres, &images, &ids(&frames), mode, ck.config.batch_size)?;
        let recon = if w > 0.0 {
            reconstruction_errors(&ck.model, &images, ck.config.batch_size)?
        } else {
            vec![0.0; frames.len()]
        };
        let clips = make_clips(&video, frames.len(), cfg.score.clip_len, 1)?;
        let clip_gamma: Vec<f64> = clips
            .clips
            .iter()
            .map(|c| c.frames().map(|f| recs[f].gamma).sum::<f64>() / c.len as f64)
            .collect();
        for (f, rec) in recs.into_iter().enumerate() {
            let per_clip: Vec<f64> = clips.membership[f].iter().map(|&k| clip_gamma[k]).collect();
            let g = frame_score(&per_clip, cfg.score.eq8_variant);
            out.push(ScoreRecord {
                gamma: add_reconstruction_term(g, recon[f], w),
                ..rec
            });
        }
    }
    Ok(out)
}

/// Joins scores with manifest labels and writes the `eval/` reports.
pub fn eval(scores: &Path, manifest: &Path, split: Split, out_dir: &Path) -> Result<PathBuf> {
    let rows = read_scores_csv(std::fs::File::open(scores).with_context(|| format!("opening {}", scores.display()))?)?;
    let m = Manifest::read(manifest)?;
    let labels: BTreeMap<&str, u8> = m.split(split).iter().map(|e| (e.path.as_str(), e.label)).collect();
    let scored: BTreeSet<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    let unlabeled: Vec<&str> = scored.iter().filter(|id| !labels.contains_key(*id)).copied().collect();
    let unscored: Vec<&str> = labels.keys().filter(|id| !scored.contains(*id)).copied().collect();
    if !unlabeled.is_empty() || !unscored.is_empty() {
        bail!(
            "score ids do not match the {split} split: missing from manifest {unlabeled:?}, missing from scores {unscored:?}"
        );
    }
    ensure!(scored.len() == rows.len(), "scores file repeats sample ids");

    let gammas: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let y: Vec<u8> = rows.iter().map(|r| labels[r.0.as_str()]).collect();
    let report = evaluate(&gammas, &y)?;
    let pick = |l: u8| -> Vec<f64> { gammas.iter().zip(&y).filter(|(_, &v)| v == l).map(|(g, _)| *g).collect() };
    let cdf = cdf_export(&pick(0), &pick(1))?;
    let records: Vec<ScoreRecord> = rows
        .iter()
        .map(|(id, g, tau)| ScoreRecord {
            sample_id: id.clone(),
            tau: tau.clone(),
            gamma: *g,
            mode: BoundaryMode::Hard,
        })
        .collect();
    let sep = if records.first().is_some_and(|r| !r.tau.is_empty()) {
        layer_separation(&records, &y)?
    } else {
        BTreeMap::new()
    };

    let mut out = Outputs::default();
    out.csv("eval/summary.csv", |w| write_summary_csv(w, &report))?;
    out.csv("eval/roc.csv", |w| write_roc_csv(w, &report))?;
    out.csv("eval/cdf_normal.csv", |w| write_cdf_csv(w, &cdf.normal))?;
    out.csv("eval/cdf_anomalous.csv", |w| write_cdf_csv(w, &cdf.anomalous))?;
    let mut sep_csv = String::from("layer,gap\n");
    for (j, g) in &sep {
        sep_csv.push_str(&format!("{j},{g:.12}\n"));
    }
    out.add("eval/layer_separation.csv", sep_csv);
    out.commit(out_dir)?;
    Ok(out_dir.to_path_buf())
}

/// Runs the configured layer ablation and writes `ablation.csv`.
pub fn ablate(config: &Path, o: &TrainOverrides, threads: usize) -> Result<PathBuf> {
    let (mut cfg, text) = RunConfig::load(config)?;
    apply_train_overrides(&mut cfg, o);
    if let Some(s) = o.seed {
        cfg.ablation.seeds = vec![s];
    }
    if let Some(l) = &o.layers {
        cfg.ablation.subsets = vec![l.clone()];
    }
    cfg.validate()?;
    let dir = out_dir(&o.out, &cfg)?;
    let manifest = manifest_path(&None, &cfg)?;
    let train = load_training(&manifest, &cfg)?;
    let test = load_split(&manifest, Split::Test, &cfg)?;
    let (arch, selectors) = cfg.model.architecture()?;
    let subsets = cfg.ablation_subsets()?;
    let setup = AblationSetup {
        arch: &arch,
        selectors: &selectors,
        cfg: &cfg.train,
        train: &train,
        test: &test,
        metric: cfg.ablation.metric,
    };
    let rows = ablation_sweep(&setup, &subsets, &cfg.ablation.seeds, threads)?;
    let mut out = Outputs::default();
    out.csv("ablation.csv", |w| write_ablation_csv(w, &rows))?;
    config_files(&mut out, &cfg, &text)?;
    out.commit(&dir)?;
    Ok(dir)
}

/// Generates the configured synthetic dataset as PNGs plus `manifest.csv`.
pub fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?.0,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synthetic.seed = s;
    }
    let split = generate(&cfg.synthetic)?;
    Ok(export_dataset(out, &split.train, &split.test)?)
}

/// Runs the operator gradient suite; `out` receives `gradcheck.csv`.
pub fn gradcheck(cfg: &SuiteConfig, out: Option<&Path>) -> Result<Vec<OperatorCheck>> {
    let report = operator_suite(cfg)?;
    if let Some(dir) = out {
        let mut csv = String::from("operator,checks,failures,worst_deviation\n");
        for c in &report {
            csv.push_str(&format!("{},{},{},{:.6e}\n", c.operator, c.checks, c.failures, c.worst_deviation));
        }
        let mut o = Outputs::default();
        o.add("gradcheck.csv", csv);
        o.commit(dir)?;
    }
    Ok(report)
}
