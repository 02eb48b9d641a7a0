//! `path,split,label` manifests over PNG/PGM folder trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::preprocess::{hwc, Preprocess};
use super::Sample;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => Err(Error::invalid(format!("split must be train or test, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path as written in the manifest (relative to its directory).
    pub path: String,
    pub split: Split,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| err(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != ["path", "split", "label"] {
            return Err(err(format!("header must be path,split,label, got {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut entries = Vec::new();
        for (line, rec) in rd.deserialize::<ManifestEntry>().enumerate() {
            let e = rec.map_err(|e| err(format!("record {}: {e}", line + 1)))?;
            if e.label > 1 {
                return Err(err(format!("record {}: label must be 0 or 1", line + 1)));
            }
            if e.split == Split::Train && e.label != 0 {
                return Err(err(format!(
                    "record {}: training split holds anomalous sample {}",
                    line + 1,
                    e.path
                )));
            }
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(err("no records".into()));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path)?;
        for e in &self.entries {
            wr.serialize(e)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Loads one split with `channels` channels, preprocessed.
    pub fn load(&self, split: Split, channels: usize, pre: &Preprocess) -> Result<Vec<Sample>> {
        self.split(split)
            .into_iter()
            .map(|e| {
                let img = load_image(&self.root.join(&e.path), channels)?;
                Ok(Sample {
                    id: e.path.clone(),
                    image: pre.apply(&img)?,
                    label: e.label,
                })
            })
            .collect()
    }
}

/// Loads an image as `[H, W, channels]` floats in `[0, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match channels {
        1 => img.to_luma32f().into_raw(),
        3 => img.into_rgb32f().into_raw(),
        _ => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("unsupported channel count {channels}"),
            })
        }
    };
    Tensor::new(vec![h, w, channels], data)
}

/// Writes an 8-bit PNG; values are clamped to `[0, 1]`.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = hwc(image)?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let fail = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    match c {
        1 => GrayImage::from_raw(w as u32, h as u32, bytes).unwrap().save(path).map_err(fail),
        3 => RgbImage::from_raw(w as u32, h as u32, bytes).unwrap().save(path).map_err(fail),
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("cannot save a {c}-channel image"),
        }),
    }
}

/// Writes `train` and `test` under `dir` as `<split>/<id>.png` plus
/// `manifest.csv`, returning the manifest path.
pub fn export_dataset(dir: &Path, train: &[Sample], test: &[Sample]) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for (split, samples) in [(Split::Train, train), (Split::Test, test)] {
        if samples.is_empty() {
            continue;
        }
        fs::create_dir_all(dir.join(split.to_string()))?;
        for s in samples {
            if split == Split::Train && s.label != 0 {
                return Err(Error::invalid(format!("training sample {} is labelled anomalous", s.id)));
            }
            let rel = format!("{split}/{}.png", s.id);
            save_png(&dir.join(&rel), &s.image)?;
            entries.push(ManifestEntry {
                path: rel,
                split,
                label: s.label,
            });
        }
    }
    let path = dir.join("manifest.csv");
    Manifest {
        root: dir.to_path_buf(),
        entries,
    }
    .write(&path)?;
    Ok(path)
}

/// Groups samples into videos by parent directory, frames sorted by id.
pub fn group_videos(samples: Vec<Sample>) -> BTreeMap<String, Vec<Sample>> {
    let mut out: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        let video = Path::new(&s.id)
            .parent()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.entry(video).or_default().push(s);
    }
    for frames in out.values_mut() {
        frames.sort_by(|a, b| a.id.cmp(&b.id));
    }
    out
}
