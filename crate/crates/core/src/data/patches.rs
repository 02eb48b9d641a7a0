use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};

use super::preprocess::hwc;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Non-overlapping square patches of one image in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub parent_id: String,
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<Tensor>,
}

pub fn extract_patches(parent_id: &str, image: &Tensor, patch: usize) -> Result<PatchGrid> {
    let (h, w, c) = hwc(image)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let src = image.data();
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let mut data = Vec::with_capacity(patch * patch * c);
            for y in r * patch..(r + 1) * patch {
                let start = (y * w + q * patch) * c;
                data.extend_from_slice(&src[start..start + patch * c]);
            }
            patches.push(Tensor::from_parts(vec![patch, patch, c], data));
        }
    }
    Ok(PatchGrid {
        parent_id: parent_id.to_string(),
        rows,
        cols,
        patches,
    })
}

/// Inverse of [`extract_patches`].
pub fn reassemble(grid: &PatchGrid) -> Result<Tensor> {
    let first = grid.patches.first().ok_or(Error::Empty("patch grid"))?;
    let (p, _, c) = hwc(first)?;
    if grid.patches.len() != grid.rows * grid.cols {
        return Err(Error::invalid("patch count does not match the grid"));
    }
    let (h, w) = (grid.rows * p, grid.cols * p);
    let mut out = vec![0.0f32; h * w * c];
    for (k, t) in grid.patches.iter().enumerate() {
        let (r, q) = (k / grid.cols, k % grid.cols);
        for py in 0..p {
            let dst = ((r * p + py) * w + q * p) * c;
            out[dst..dst + p * c].copy_from_slice(&t.data()[py * p * c..(py + 1) * p * c]);
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Bilinear resize of a 1- or 3-channel image.
pub fn resize(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(image)?;
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let (h32, w32, nh, nw) = (h as u32, w as u32, height as u32, width as u32);
    let data = match c {
        1 => {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w32, h32, image.data().to_vec()).unwrap();
            imageops::resize(&buf, nw, nh, FilterType::Triangle).into_raw()
        }
        3 => {
            let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w32, h32, image.data().to_vec()).unwrap();
            imageops::resize(&buf, nw, nh, FilterType::Triangle).into_raw()
        }
        _ => return Err(Error::invalid(format!("cannot resize a {c}-channel image"))),
    };
    Ok(Tensor::from_parts(vec![height, width, c], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_tensor;

    #[test]
    fn counts_and_round_trip() {
        let big = random_tensor(&[512, 512, 1], 0.0, 1.0, 1);
        assert_eq!(extract_patches("a", &big, 64).unwrap().patches.len(), 64);
        let img = random_tensor(&[128, 128, 3], 0.0, 1.0, 2);
        let g = extract_patches("b", &img, 64).unwrap();
        assert_eq!(g.patches.len(), 4);
        assert_eq!(reassemble(&g).unwrap(), img);
        assert!(extract_patches("c", &img, 48).is_err());
    }

    #[test]
    fn row_major_order() {
        let v: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = Tensor::new(vec![4, 4, 1], v).unwrap();
        let g = extract_patches("m", &img, 2).unwrap();
        assert_eq!(g.patches[1].data(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g.patches[2].data(), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn resize_shapes() {
        let img = random_tensor(&[10, 6, 3], 0.0, 1.0, 3);
        assert_eq!(resize(&img, 8, 8).unwrap().shape(), &[8, 8, 3]);
        let flat = Tensor::full(&[5, 5, 1], 0.25);
        assert!(resize(&flat, 16, 16).unwrap().data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
