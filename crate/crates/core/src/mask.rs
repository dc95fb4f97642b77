//! Label masks, their on-disk form, and overlay rendering.
//!
//! A mask is stored as an 8-bit single-channel PNG whose pixel values are
//! labels (`0` is background, `i` is the `i`-th category) plus a JSON
//! sidecar next to it mapping label index to category name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const BACKGROUND: &str = "background";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    labels: Array2<u8>,
    categories: Vec<String>,
}

impl SegmentationMask {
    pub fn new(labels: Array2<u8>, categories: Vec<String>) -> Result<Self> {
        if categories.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "{} categories do not fit an 8-bit mask",
                categories.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > categories.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} exceeds category count {}",
                categories.len()
            )));
        }
        Ok(Self { labels, categories })
    }

    pub fn background(shape: (usize, usize), categories: Vec<String>) -> Self {
        Self {
            labels: Array2::zeros(shape),
            categories,
        }
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Name of a label value, `background` for 0.
    pub fn name(&self, label: u8) -> Option<&str> {
        match label {
            0 => Some(BACKGROUND),
            l => self.categories.get(l as usize - 1).map(String::as_str),
        }
    }

    pub fn sidecar_path(png: &Path) -> PathBuf {
        png.with_extension("json")
    }

    pub fn sidecar(&self) -> BTreeMap<String, String> {
        std::iter::once(("0".to_string(), BACKGROUND.to_string()))
            .chain(
                self.categories
                    .iter()
                    .enumerate()
                    .map(|(i, c)| ((i + 1).to_string(), c.clone())),
            )
            .collect()
    }

    /// Writes `path` (PNG) and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path)?;
        let sidecar = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(Self::sidecar_path(path), sidecar)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let labels = read_gray8(path)?;
        let sidecar_path = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar_path)
            .map_err(|_| Error::MissingFiles(vec![sidecar_path.clone()]))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
        let mut indexed: Vec<(usize, String)> = map
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|i| (i, v))
                    .map_err(|_| Error::InvalidArgument(format!("sidecar key {k:?} is not a label index")))
            })
            .collect::<Result<_>>()?;
        indexed.sort();
        let categories: Vec<String> = indexed.into_iter().filter(|(i, _)| *i > 0).map(|(_, v)| v).collect();
        Self::new(labels, categories)
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        let (h, w) = self.shape();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([self.labels[[y as usize, x as usize]]]))
    }

    /// Blends category colors over `image` (background left untouched).
    pub fn overlay(&self, image: &RgbImage, alpha: f32) -> Result<RgbImage> {
        if image.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: image.shape(),
            });
        }
        let px = image.pixels();
        RgbImage::from_fn(image.height(), image.width(), |r, c| {
            let label = self.labels[[r, c]];
            let base = [px[[r, c, 0]], px[[r, c, 1]], px[[r, c, 2]]];
            if label == 0 {
                return base;
            }
            let color = palette(label);
            std::array::from_fn(|k| (1.0 - alpha) * base[k] + alpha * color[k] as f32 / 255.0)
        })
    }
}

/// Reads an 8-bit grayscale or palette PNG as raw sample values.
pub fn read_gray8(path: &Path) -> Result<Array2<u8>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingFiles(vec![path.to_path_buf()]))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::InvalidImage(format!("{}: expected 8-bit samples", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::InvalidImage(format!(
                "{}: expected a grayscale or palette PNG, got {other:?}",
                path.display()
            )))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        let row = &buf[r * info.line_size..];
        for c in 0..w {
            out[[r, c]] = row[c * channels];
        }
    }
    Ok(out)
}

/// The PASCAL VOC color map.
pub fn palette(label: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut l = label;
    for shift in (0..8).rev() {
        for (k, channel) in rgb.iter_mut().enumerate() {
            *channel |= ((l >> k) & 1) << shift;
        }
        l >>= 3;
    }
    rgb
}

/// Renders a `[0, 1]` score field as a blue-to-red heatmap.
pub fn heatmap(scores: &Array2<f32>) -> Result<RgbImage> {
    let (h, w) = scores.dim();
    RgbImage::from_fn(h, w, |r, c| {
        let v = scores[[r, c]].clamp(0.0, 1.0);
        let red = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
        let green = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
        let blue = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
        [red, green, blue]
    })
}
