//! RGB rasters with a record of where each pixel came from.

use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps pixel coordinates of a derived raster back onto its source raster.
///
/// Crops and horizontal flips compose into `src_row = row_origin + row` and
/// `src_col = col_origin + col_step * col` with `col_step` in `{-1, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFrame {
    pub source_height: usize,
    pub source_width: usize,
    pub row_origin: i64,
    pub col_origin: i64,
    pub col_step: i64,
}

impl SourceFrame {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            source_height: height,
            source_width: width,
            row_origin: 0,
            col_origin: 0,
            col_step: 1,
        }
    }

    /// Source coordinates of `(row, col)`, or `None` when they fall outside
    /// the source.
    pub fn map(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        let r = self.row_origin + row as i64;
        let c = self.col_origin + self.col_step * col as i64;
        if r < 0 || c < 0 || r as usize >= self.source_height || c as usize >= self.source_width {
            return None;
        }
        Some((r as usize, c as usize))
    }

    fn cropped(&self, y: usize, x: usize) -> Self {
        Self {
            row_origin: self.row_origin + y as i64,
            col_origin: self.col_origin + self.col_step * x as i64,
            ..*self
        }
    }

    fn flipped(&self, width: usize) -> Self {
        Self {
            col_origin: self.col_origin + self.col_step * (width as i64 - 1),
            col_step: -self.col_step,
            ..*self
        }
    }

    pub fn is_identity(&self) -> bool {
        self.row_origin == 0 && self.col_origin == 0 && self.col_step == 1
    }
}

/// An RGB image with channel values in `[0, 1]`, stored `(height, width, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pixels: Array3<f32>,
    frame: SourceFrame,
}

impl RgbImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage(format!("zero-sized raster {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite pixel values".into()));
        }
        Ok(Self {
            pixels,
            frame: SourceFrame::identity(h, w),
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Array3::zeros((height, width, 3));
        for r in 0..height {
            for c in 0..width {
                let rgb = f(r, c);
                for (k, v) in rgb.into_iter().enumerate() {
                    pixels[[r, c, k]] = v;
                }
            }
        }
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn frame(&self) -> &SourceFrame {
        &self.frame
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || y + height > self.height() || x + width > self.width() {
            return Err(Error::InvalidImage(format!(
                "crop {height}x{width} at ({y},{x}) outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            pixels: self.pixels.slice(s![y..y + height, x..x + width, ..]).to_owned(),
            frame: self.frame.cropped(y, x),
        })
    }

    pub fn hflip(&self) -> Self {
        let mut pixels = self.pixels.clone();
        pixels.invert_axis(Axis(1));
        Self {
            pixels: pixels.as_standard_layout().to_owned(),
            frame: self.frame.flipped(self.width()),
        }
    }

    /// Blends every pixel with the mean luminance: `mean + factor * (v - mean)`,
    /// clamped to `[0, 1]`.
    pub fn with_contrast(&self, factor: f32) -> Self {
        let mean = self.luminance().mean().unwrap_or(0.0);
        let pixels = self.pixels.mapv(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0));
        Self {
            pixels,
            frame: self.frame,
        }
    }

    pub fn luminance(&self) -> Array2<f32> {
        let (h, w, _) = self.pixels.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            0.299 * self.pixels[[r, c, 0]] + 0.587 * self.pixels[[r, c, 1]] + 0.114 * self.pixels[[r, c, 2]]
        })
    }

    /// Bilinear resize with half-pixel centers. The result is a fresh source.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let mut out = Array3::zeros((height, width, 3));
        for k in 0..3 {
            let channel = self.pixels.index_axis(Axis(2), k).to_owned();
            let resized = resize_bilinear(&channel, height, width);
            out.index_axis_mut(Axis(2), k).assign(&resized);
        }
        Self::new(out)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let decoded = image::open(path)?.to_rgb8();
        Self::from_rgb8(&decoded)
    }

    pub fn from_rgb8(buffer: &image::RgbImage) -> Result<Self> {
        let (w, h) = buffer.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in buffer.enumerate_pixels() {
            for k in 0..3 {
                pixels[[y as usize, x as usize, k]] = px.0[k] as f32 / 255.0;
            }
        }
        Self::new(pixels)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.shape();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |k| (self.pixels[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Bilinear resampling of a scalar field (half-pixel centers, edge clamp).
pub fn resize_bilinear(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let coord = |dst: usize, dst_len: usize, src_len: usize| -> (usize, usize, f32) {
        let pos = ((dst as f32 + 0.5) * src_len as f32 / dst_len as f32 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f32)
    };
    let cols: Vec<_> = (0..width).map(|c| coord(c, width, sw)).collect();
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, fr) = coord(r, height, sh);
        let (c0, c1, fc) = cols[c];
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> RgbImage {
        RgbImage::from_fn(h, w, |r, c| [r as f32 / h as f32, c as f32 / w as f32, 0.5]).unwrap()
    }

    #[test]
    fn zero_sized_raster_is_rejected() {
        assert!(matches!(
            RgbImage::new(Array3::zeros((0, 4, 3))),
            Err(Error::InvalidImage(_))
        ));
    }

    #[test]
    fn frame_tracks_crop_then_flip() {
        let img = gradient(10, 12);
        let view = img.crop(2, 3, 5, 6).unwrap().hflip();
        for r in 0..5 {
            for c in 0..6 {
                let (sr, sc) = view.frame().map(r, c).unwrap();
                assert_eq!((sr, sc), (r + 2, 3 + (5 - c)));
                assert_eq!(view.pixels()[[r, c, 1]], img.pixels()[[sr, sc, 1]]);
            }
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img = gradient(7, 9);
        let back = img.hflip().hflip();
        assert_eq!(back, img);
        assert!(back.frame().is_identity());
    }

    #[test]
    fn contrast_one_is_noop() {
        let img = gradient(5, 5);
        assert_eq!(img.with_contrast(1.0).pixels(), img.pixels());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let src = Array2::from_elem((7, 7), 0.25f32);
        let up = resize_bilinear(&src, 31, 17);
        assert!(up.iter().all(|v| (v - 0.25).abs() < 1e-7));
    }
}
