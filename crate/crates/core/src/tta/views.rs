use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::seed;

/// Range the contrast view draws its factor from.
pub const CONTRAST_RANGE: (f32, f32) = (0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Identity,
    Hflip,
    Contrast,
    Crop,
}

impl ViewKind {
    pub const ALL: [ViewKind; 4] = [ViewKind::Identity, ViewKind::Hflip, ViewKind::Contrast, ViewKind::Crop];

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewKind::Identity => "identity",
            ViewKind::Hflip => "hflip",
            ViewKind::Contrast => "contrast",
            ViewKind::Crop => "crop",
        }
    }

    /// Parses a comma separated list such as `identity,crop`.
    pub fn parse_list(s: &str) -> Result<Vec<ViewKind>> {
        let mut kinds: Vec<ViewKind> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(Error::EmptyViewSet);
        }
        Ok(kinds)
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(ViewKind::Identity),
            "hflip" | "flip" => Ok(ViewKind::Hflip),
            "contrast" => Ok(ViewKind::Contrast),
            "crop" | "crops" => Ok(ViewKind::Crop),
            other => Err(Error::InvalidArgument(format!("unknown view kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropGridSpec {
    pub crop_size: usize,
    pub stride: usize,
    /// A crop contributes only when the category probability exceeds this.
    pub gate_threshold: f64,
}

impl Default for CropGridSpec {
    fn default() -> Self {
        Self {
            crop_size: 224,
            stride: 50,
            gate_threshold: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl CropGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::InvalidGrid("crop_size must be positive".into()));
        }
        if self.stride == 0 || self.stride > self.crop_size {
            return Err(Error::InvalidGrid(format!(
                "stride {} must lie in 1..={}",
                self.stride, self.crop_size
            )));
        }
        if !(0.0..1.0).contains(&self.gate_threshold) {
            return Err(Error::InvalidGrid(format!(
                "gate threshold {} must lie in [0, 1)",
                self.gate_threshold
            )));
        }
        Ok(())
    }

    /// Crop side actually used on an image: never larger than its short side.
    pub fn effective_size(&self, height: usize, width: usize) -> usize {
        self.crop_size.min(height).min(width)
    }

    /// Regular grid starting at 0; the last position is clamped so the crop
    /// ends exactly at the border.
    pub fn positions(len: usize, size: usize, stride: usize) -> Vec<usize> {
        let last = len.saturating_sub(size);
        let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p < last).collect();
        out.push(last);
        out
    }

    /// All crop boxes in row-major order.
    pub fn boxes(&self, height: usize, width: usize) -> Result<Vec<CropBox>> {
        self.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage("zero-sized raster".into()));
        }
        let size = self.effective_size(height, width);
        let stride = self.stride.min(size);
        let ys = Self::positions(height, size, stride);
        let xs = Self::positions(width, size, stride);
        Ok(ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| CropBox { x, y, size }))
            .collect())
    }
}

/// One augmentation view with the ability to map relevance back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ViewTransform {
    Identity,
    Hflip,
    Contrast { factor: f32 },
    Crop(CropBox),
}

/// Relevance expressed on the original image, with the pixels the view saw.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRelevance {
    pub scores: Array2<f32>,
    pub valid: Array2<bool>,
}

impl ViewTransform {
    pub fn kind(&self) -> ViewKind {
        match self {
            ViewTransform::Identity => ViewKind::Identity,
            ViewTransform::Hflip => ViewKind::Hflip,
            ViewTransform::Contrast { .. } => ViewKind::Contrast,
            ViewTransform::Crop(_) => ViewKind::Crop,
        }
    }

    pub fn forward(&self, image: &RgbImage) -> Result<RgbImage> {
        match *self {
            ViewTransform::Identity => Ok(image.clone()),
            ViewTransform::Hflip => Ok(image.hflip()),
            ViewTransform::Contrast { factor } => Ok(image.with_contrast(factor)),
            ViewTransform::Crop(b) => image.crop(b.y, b.x, b.size, b.size),
        }
    }

    /// Places view-space scores onto an `original` sized canvas.
    pub fn backward_relevance(&self, scores: &Array2<f32>, original: (usize, usize)) -> Result<ViewRelevance> {
        let expect = match *self {
            ViewTransform::Crop(b) => (b.size, b.size),
            _ => original,
        };
        if scores.dim() != expect {
            return Err(Error::ShapeMismatch {
                expected: expect,
                actual: scores.dim(),
            });
        }
        Ok(match *self {
            ViewTransform::Identity | ViewTransform::Contrast { .. } => ViewRelevance {
                scores: scores.clone(),
                valid: Array2::from_elem(original, true),
            },
            ViewTransform::Hflip => {
                let mut flipped = scores.clone();
                flipped.invert_axis(Axis(1));
                ViewRelevance {
                    scores: flipped.as_standard_layout().to_owned(),
                    valid: Array2::from_elem(original, true),
                }
            }
            ViewTransform::Crop(b) => {
                if b.y + b.size > original.0 || b.x + b.size > original.1 {
                    return Err(Error::InvalidGrid(format!("crop {b:?} exceeds {original:?}")));
                }
                let mut canvas = Array2::zeros(original);
                let mut valid = Array2::from_elem(original, false);
                canvas.slice_mut(s![b.y..b.y + b.size, b.x..b.x + b.size]).assign(scores);
                valid.slice_mut(s![b.y..b.y + b.size, b.x..b.x + b.size]).fill(true);
                ViewRelevance { scores: canvas, valid }
            }
        })
    }
}

/// Expands the requested kinds into concrete transforms, in canonical kind
/// order. The crop kind becomes the full grid.
pub fn make_views(image: &RgbImage, kinds: &[ViewKind], grid: &CropGridSpec, seed: u64) -> Result<Vec<ViewTransform>> {
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    if kinds.is_empty() {
        return Err(Error::EmptyViewSet);
    }
    let mut rng = seed::rng(seed::derive(seed, &[&"contrast"]));
    let mut views = Vec::new();
    for kind in kinds {
        match kind {
            ViewKind::Identity => views.push(ViewTransform::Identity),
            ViewKind::Hflip => views.push(ViewTransform::Hflip),
            ViewKind::Contrast => {
                let factor = rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
                views.push(ViewTransform::Contrast { factor });
            }
            ViewKind::Crop => views.extend(
                grid.boxes(image.height(), image.width())?
                    .into_iter()
                    .map(ViewTransform::Crop),
            ),
        }
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamped_grid_positions() {
        assert_eq!(CropGridSpec::positions(400, 224, 50), vec![0, 50, 100, 150, 176]);
        assert_eq!(CropGridSpec::positions(224, 224, 50), vec![0]);
        assert_eq!(CropGridSpec::positions(324, 224, 50), vec![0, 50, 100]);
    }

    #[test]
    fn grid_on_400_square_has_25_crops() {
        let boxes = CropGridSpec::default().boxes(400, 400).unwrap();
        assert_eq!(boxes.len(), 25);
        assert!(boxes.iter().all(|b| b.x + b.size <= 400 && b.y + b.size <= 400));
    }

    #[test]
    fn crop_is_clamped_to_short_side() {
        let boxes = CropGridSpec::default().boxes(100, 300).unwrap();
        assert!(boxes.iter().all(|b| b.size == 100 && b.y == 0));
        assert_eq!(boxes.len(), CropGridSpec::positions(300, 100, 50).len());
    }

    #[test]
    fn invalid_grids() {
        let bad = |crop_size, stride, gate_threshold| CropGridSpec {
            crop_size,
            stride,
            gate_threshold,
        };
        assert!(bad(0, 1, 0.3).validate().is_err());
        assert!(bad(10, 0, 0.3).validate().is_err());
        assert!(bad(10, 11, 0.3).validate().is_err());
        assert!(bad(10, 5, 1.0).validate().is_err());
        assert!(bad(10, 10, 0.0).validate().is_ok());
    }

    #[test]
    fn identity_only() {
        let img = RgbImage::filled(6, 6, [0.2; 3]).unwrap();
        let views = make_views(&img, &[ViewKind::Identity], &CropGridSpec::default(), 0).unwrap();
        assert_eq!(views, vec![ViewTransform::Identity]);
        assert_eq!(views[0].forward(&img).unwrap(), img);
    }

    #[test]
    fn empty_view_set() {
        let img = RgbImage::filled(6, 6, [0.2; 3]).unwrap();
        assert!(matches!(
            make_views(&img, &[], &CropGridSpec::default(), 0),
            Err(Error::EmptyViewSet)
        ));
        assert!(ViewKind::parse_list(" , ").is_err());
    }

    #[test]
    fn contrast_factor_is_seeded() {
        let img = RgbImage::filled(6, 6, [0.2; 3]).unwrap();
        let grid = CropGridSpec::default();
        let a = make_views(&img, &[ViewKind::Contrast], &grid, 11).unwrap();
        let b = make_views(&img, &[ViewKind::Contrast], &grid, 11).unwrap();
        let c = make_views(&img, &[ViewKind::Contrast], &grid, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let ViewTransform::Contrast { factor } = a[0] else { panic!() };
        assert!((0.5..=1.5).contains(&factor));
    }

    #[test]
    fn crop_backward_marks_exactly_the_window() {
        let view = ViewTransform::Crop(CropBox { x: 0, y: 0, size: 224 });
        let back = view
            .backward_relevance(&Array2::from_elem((224, 224), 0.5), (448, 448))
            .unwrap();
        for ((r, c), &ok) in back.valid.indexed_iter() {
            assert_eq!(ok, r < 224 && c < 224);
            assert_eq!(back.scores[[r, c]], if ok { 0.5 } else { 0.0 });
        }
    }

    #[test]
    fn flip_backward_undoes_flip() {
        let scores = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f32);
        let back = ViewTransform::Hflip.backward_relevance(&scores, (3, 4)).unwrap();
        assert_eq!(back.scores[[1, 0]], scores[[1, 3]]);
        let again = ViewTransform::Hflip.backward_relevance(&back.scores, (3, 4)).unwrap();
        assert_eq!(again.scores, scores);
    }

    #[test]
    fn parse_view_lists() {
        assert_eq!(
            ViewKind::parse_list("crop, identity,crop").unwrap(),
            vec![ViewKind::Identity, ViewKind::Crop]
        );
        assert!(ViewKind::parse_list("zoom").is_err());
    }
}
