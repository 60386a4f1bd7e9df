//! RGB float images: loading, normalization, flips and resizing.

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// `height × width × 3` image, row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values cannot form a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Reads an 8-bit image and scales it to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }

    /// Per-channel `(v - mean) / std`.
    pub fn normalized(&self, mean: [f32; 3], std: [f32; 3]) -> Self {
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|p| [0, 1, 2].map(|c| (p[c] - mean[c]) / std[c]))
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            let (y0, y1, wy) = source_coord(y, height, self.height);
            for x in 0..width {
                let (x0, x1, wx) = source_coord(x, width, self.width);
                let (a, b, c, d) = (
                    self.pixel(y0, x0),
                    self.pixel(y0, x1),
                    self.pixel(y1, x0),
                    self.pixel(y1, x1),
                );
                let px = [0, 1, 2].map(|k| {
                    let top = a[k] * (1.0 - wx) + b[k] * wx;
                    let bot = c[k] * (1.0 - wx) + d[k] * wx;
                    top * (1.0 - wy) + bot * wy
                });
                out.set_pixel(y, x, px);
            }
        }
        out
    }
}

/// Source indices and blend weight for output index `i` (half-pixel centers, edge clamp).
pub(crate) fn source_coord(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let img = Image::new(2, 3, (0..18).map(|v| v as f32).collect()).unwrap();
        assert_eq!(img.flipped_horizontally().flipped_horizontally(), img);
        assert_eq!(img.flipped_horizontally().pixel(0, 0), img.pixel(0, 2));
    }

    #[test]
    fn resize_same_size_is_identity_and_constant_stays_constant() {
        let img = Image::new(4, 4, vec![0.25; 48]).unwrap();
        assert_eq!(img.resized(4, 4), img);
        assert!(img.resized(7, 3).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Image::new(1, 2, vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        img.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }
}
