use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const GCN_EPSILON: f32 = 1e-8;

/// Per-image normalization applied at load time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preprocess {
    #[default]
    None,
    GcnL1,
    Minmax {
        lo: f32,
        hi: f32,
    },
}

impl Preprocess {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match *self {
            Preprocess::None => Ok(image.clone()),
            Preprocess::GcnL1 => Ok(gcn_l1(image, GCN_EPSILON)),
            Preprocess::Minmax { lo, hi } => minmax_normalize(image, lo, hi),
        }
    }
}

fn extent(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Subtracts the mean, divides by `max(‖x − mean‖₁, ε)`, then rescales
/// to `[0, 1]`. Constant images become all 0.5.
pub fn gcn_l1(image: &Tensor, epsilon: f32) -> Tensor {
    let n = image.numel() as f64;
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let centered: Vec<f64> = image.data().iter().map(|&v| v as f64 - mean).collect();
    let l1 = centered.iter().map(|v| v.abs()).sum::<f64>().max(epsilon as f64);
    let scaled: Vec<f64> = centered.iter().map(|v| v / l1).collect();
    let lo = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi - lo <= 0.0 {
        vec![0.5; scaled.len()]
    } else {
        scaled.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
    };
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Affine map of `[min, max]` onto `[lo, hi]`; constant images map to the midpoint.
pub fn minmax_normalize(image: &Tensor, lo: f32, hi: f32) -> Result<Tensor> {
    if !(hi > lo) {
        return Err(Error::invalid(format!("minmax range needs hi > lo, got [{lo}, {hi}]")));
    }
    let (mn, mx) = extent(image.data());
    let data = if mx == mn {
        vec![(lo + hi) / 2.0; image.numel()]
    } else {
        let (mn, mx, lo, hi) = (mn as f64, mx as f64, lo as f64, hi as f64);
        image
            .data()
            .iter()
            .map(|&v| (lo + (v as f64 - mn) * (hi - lo) / (mx - mn)) as f32)
            .collect()
    };
    Ok(Tensor::from_parts(image.shape().to_vec(), data))
}

/// Inverse of [`minmax_normalize`] given the original extent `[mn, mx]`.
pub fn minmax_denormalize(image: &Tensor, lo: f32, hi: f32, mn: f32, mx: f32) -> Tensor {
    let (mn, mx, lo, hi) = (mn as f64, mx as f64, lo as f64, hi as f64);
    let data = image
        .data()
        .iter()
        .map(|&v| (mn + (v as f64 - lo) * (mx - mn) / (hi - lo)) as f32)
        .collect();
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Bilinear rotation by `angle` radians (counter-clockwise in image
/// coordinates with y pointing down) about the pixel-grid center; samples
/// falling outside take the nearest edge value.
pub fn rotate(image: &Tensor, angle: f64) -> Result<Tensor> {
    let (h, w, c) = hwc(image)?;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = angle.sin_cos();
    let src = image.data();
    let at = |y: isize, x: isize, ch: usize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[(y * w + x) * c + ch] as f64
    };
    let mut out = vec![0.0f32; image.numel()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map: rotate the destination point by -angle
            let sx = co * dx - s * dy + cx;
            let sy = s * dx + co * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0, ch) + fx * at(y0 + 1, x0 + 1, ch));
                out[(y * w + x) * c + ch] = v as f32;
            }
        }
    }
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

/// Rotation by an angle drawn uniformly from `[lo_rad, hi_rad]` with `seed`.
pub fn random_rotation(image: &Tensor, lo_rad: f64, hi_rad: f64, seed: u64) -> Result<Tensor> {
    if !(lo_rad <= hi_rad) {
        return Err(Error::invalid(format!("rotation range [{lo_rad}, {hi_rad}] is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = if lo_rad == hi_rad {
        lo_rad
    } else {
        rng.gen_range(lo_rad..=hi_rad)
    };
    rotate(image, angle)
}

pub(crate) fn hwc(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape("image", format!("expected [H, W, C], got {s:?}"))),
    }
}
