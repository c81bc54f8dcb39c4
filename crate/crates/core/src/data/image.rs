use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// RGB image, row-major `H×W×3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Rec. 601 luma, rounded to the nearest 8-bit level.
pub fn luminance_u8(r: u8, g: u8, b: u8) -> u8 {
    let l = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    libm_round(l).clamp(0.0, 255.0) as u8
}

fn libm_round(v: f64) -> f64 {
    num_traits::Float::round(v)
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Builds from 8-bit RGB triples; values become `v / 255`.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            rgb.iter().map(|&v| v as f32 / 255.0).collect(),
        )
    }

    /// Rounds to 8-bit levels.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| libm_round((v.clamp(0.0, 1.0) * 255.0) as f64) as u8)
            .collect()
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-pixel luma with Rec. 601 weights (unrounded).
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Binary mask: luma strictly above `threshold`.
    pub fn binarize(&self, threshold: f32) -> Vec<bool> {
        self.luma().into_iter().map(|l| l > threshold).collect()
    }

    pub fn grid(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        Ok((self.height / patch, self.width / patch))
    }

    /// Non-overlapping patches flattened as `(py, px, channel)`, one row per
    /// grid cell in row-major order: `[G_h·G_w × P²·3]`.
    pub fn patches<T: Real>(&self, patch: usize) -> Result<Tensor<T>> {
        let (gh, gw) = self.grid(patch)?;
        let row_len = patch * patch * 3;
        let mut data = Vec::with_capacity(gh * gw * row_len);
        for i in 0..gh {
            for j in 0..gw {
                for py in 0..patch {
                    let y = i * patch + py;
                    let start = (y * self.width + j * patch) * 3;
                    data.extend(
                        self.data[start..start + patch * 3]
                            .iter()
                            .map(|&v| T::of(v as f64)),
                    );
                }
            }
        }
        Tensor::new(&[gh * gw, row_len], data)
    }

    /// Inverse of [`Image::patches`]; values are clamped to `[0, 1]`.
    pub fn from_patches<T: Real>(
        patches: &Tensor<T>,
        grid_h: usize,
        grid_w: usize,
        patch: usize,
    ) -> Result<Self> {
        let row_len = patch * patch * 3;
        if patches.shape() != [grid_h * grid_w, row_len] {
            return Err(Error::dim(
                "from_patches",
                patches.shape(),
                &[grid_h * grid_w, row_len],
            ));
        }
        let (h, w) = (grid_h * patch, grid_w * patch);
        let mut data = vec![0f32; h * w * 3];
        for cell in 0..grid_h * grid_w {
            let (i, j) = (cell / grid_w, cell % grid_w);
            let row = patches.row(cell);
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        let v = row[(py * patch + px) * 3 + c].as_f64().clamp(0.0, 1.0);
                        data[((i * patch + py) * w + j * patch + px) * 3 + c] = v as f32;
                    }
                }
            }
        }
        Image::new(h, w, data)
    }

    /// Tiles four equally sized images as `[tl tr; bl br]`.
    pub fn quad(tl: &Image, tr: &Image, bl: &Image, br: &Image) -> Result<Self> {
        let (h, w) = (tl.height, tl.width);
        for im in [tr, bl, br] {
            if im.height != h || im.width != w {
                return Err(Error::dim("quad", &[h, w], &[im.height, im.width]));
            }
        }
        let mut out = Image::filled(2 * h, 2 * w, [0.0; 3]);
        for (im, oy, ox) in [(tl, 0, 0), (tr, 0, w), (bl, h, 0), (br, h, w)] {
            out.blit(im, oy, ox);
        }
        Ok(out)
    }

    /// Concatenates equally tall images left to right.
    pub fn hconcat(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("hconcat of nothing".into()))?;
        let h = first.height;
        if images.iter().any(|im| im.height != h) {
            return Err(Error::Shape("hconcat needs equal heights".into()));
        }
        let w: usize = images.iter().map(|im| im.width).sum();
        let mut out = Image::filled(h, w, [0.0; 3]);
        let mut ox = 0;
        for im in images {
            out.blit(im, 0, ox);
            ox += im.width;
        }
        Ok(out)
    }

    pub fn blit(&mut self, src: &Image, oy: usize, ox: usize) {
        for y in 0..src.height {
            let s = y * src.width * 3;
            let d = ((oy + y) * self.width + ox) * 3;
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
    }

    pub fn crop(&self, oy: usize, ox: usize, h: usize, w: usize) -> Result<Self> {
        if oy + h > self.height || ox + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({oy},{ox}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in oy..oy + h {
            let s = (y * self.width + ox) * 3;
            data.extend_from_slice(&self.data[s..s + w * 3]);
        }
        Image::new(h, w, data)
    }

    /// Nearest-neighbour upscaling of a single-channel `gh×gw` map into an
    /// RGB image, each cell becoming a `cell×cell` block.
    pub fn from_heat(values: &[f32], gh: usize, gw: usize, cell: usize) -> Result<Self> {
        if values.len() != gh * gw {
            return Err(Error::dim("from_heat", &[values.len()], &[gh, gw]));
        }
        let mut out = Image::filled(gh * cell, gw * cell, [0.0; 3]);
        for y in 0..gh * cell {
            for x in 0..gw * cell {
                let v = values[(y / cell) * gw + x / cell];
                out.set_pixel(y, x, [v, v, v]);
            }
        }
        Ok(out)
    }
}
