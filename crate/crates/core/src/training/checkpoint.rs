//! Binary checkpoint: `MOCC`, a `u16` version, a length-prefixed JSON
//! header, named tensor blocks, then per-layer sphere blocks. All numbers
//! are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{build_autoencoder, AutoencoderSpec, Model, SelectorSpec};
use crate::objective::{BoundaryMode, Hypersphere, LayerSet};

pub const MAGIC: &[u8; 4] = b"MOCC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SphereInfo {
    layer: usize,
    dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: AutoencoderSpec,
    selectors: BTreeMap<usize, SelectorSpec>,
    layer_set: LayerSet,
    boundary: BoundaryMode,
    nu: f32,
    lambda: f32,
    seed: u64,
    has_decoder: bool,
    train_config: TrainConfig,
    params: Vec<BlockInfo>,
    buffers: Vec<BlockInfo>,
    spheres: Vec<SphereInfo>,
}

/// A trained model with its spheres and the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub spheres: Vec<Hypersphere>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn layer_set(&self) -> LayerSet {
        LayerSet::new(self.spheres.iter().map(|s| s.layer_index)).expect("checkpoint has spheres")
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.config.boundary
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model, spheres: &[Hypersphere], cfg: &TrainConfig) -> Result<Vec<u8>> {
    let layer_set = LayerSet::new(spheres.iter().map(|s| s.layer_index))?;
    let header = Header {
        arch: model.spec().clone(),
        selectors: model.selectors().clone(),
        layer_set,
        boundary: cfg.boundary,
        nu: cfg.nu,
        lambda: cfg.lambda,
        seed: cfg.seed,
        has_decoder: model.has_decoder(),
        train_config: cfg.clone(),
        params: model
            .params()
            .iter()
            .map(|p| BlockInfo {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        buffers: model
            .buffers()
            .iter()
            .map(|b| BlockInfo {
                name: b.name.clone(),
                shape: b.value.shape().to_vec(),
            })
            .collect(),
        spheres: spheres
            .iter()
            .map(|s| SphereInfo {
                layer: s.layer_index,
                dim: s.dim(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let blocks = model
        .params()
        .iter()
        .map(|p| (&p.name, &p.value))
        .chain(model.buffers().iter().map(|b| (&b.name, &b.value)));
    for (name, value) in blocks {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, value.shape().len())?;
        for &d in value.shape() {
            put_u32(&mut out, d)?;
        }
        put_f32s(&mut out, value.data());
    }
    for s in spheres {
        put_u32(&mut out, s.layer_index)?;
        put_u32(&mut out, s.dim())?;
        put_f32s(&mut out, &s.centroid);
        put_f32s(&mut out, &[s.radius_sq, s.nu]);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn block(&mut self, expect: &BlockInfo) -> Result<(String, Tensor)> {
        let len = self.u32("block name length")?;
        let name = String::from_utf8(self.take(len, "block name")?.to_vec())
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        if name != expect.name {
            return Err(Error::Checkpoint(format!(
                "block {name:?} found where the header declares {:?}",
                expect.name
            )));
        }
        let ndim = self.u32("block rank")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("block dims")?);
        }
        if shape != expect.shape {
            return Err(Error::Checkpoint(format!("block {name} has shape {shape:?}, header says {:?}", expect.shape)));
        }
        let data = self.f32s(shape.iter().product(), &name)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("block {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes (not a MOCC checkpoint)".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {VERSION})"
        )));
    }
    let hlen = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut model = build_autoencoder(&header.arch, &header.selectors, header.seed)
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    if !header.has_decoder {
        model.strip_decoder();
    }
    let params = header
        .params
        .iter()
        .map(|b| r.block(b))
        .collect::<Result<Vec<_>>>()?;
    let buffers = header
        .buffers
        .iter()
        .map(|b| r.block(b))
        .collect::<Result<Vec<_>>>()?;
    model.load_state(params, buffers)?;

    let mut spheres = Vec::with_capacity(header.spheres.len());
    for info in &header.spheres {
        let layer = r.u32("sphere layer")?;
        let dim = r.u32("sphere dim")?;
        if layer != info.layer || dim != info.dim {
            return Err(Error::Checkpoint(format!(
                "sphere block ({layer}, {dim}) does not match header ({}, {})",
                info.layer, info.dim
            )));
        }
        let centroid = r.f32s(dim, "centroid")?;
        let rn = r.f32s(2, "radius")?;
        spheres.push(
            Hypersphere::new(layer, centroid, rn[0], rn[1])
                .map_err(|e| Error::Checkpoint(format!("sphere {layer}: {e}")))?,
        );
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let declared: Vec<usize> = header.layer_set.to_vec();
    let stored: Vec<usize> = spheres.iter().map(|s| s.layer_index).collect();
    if declared != stored {
        return Err(Error::Checkpoint(format!(
            "header layer set {declared:?} differs from sphere blocks {stored:?}"
        )));
    }
    Ok(Checkpoint {
        model,
        spheres,
        config: header.train_config,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, spheres: &[Hypersphere], cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, to_bytes(model, spheres, cfg)?)?;
    Ok(())
}

pub fn restore(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}
