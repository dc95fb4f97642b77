//! Weight-free backend driven by known ground-truth masks.
//!
//! Relevance for a prompt is the prompt's mask as seen through the view
//! (via the raster's [`SourceFrame`](crate::raster::SourceFrame)), box
//! blurred, optionally pooled to a coarse patch grid and bilinearly
//! upsampled, plus seeded Gaussian noise, clipped at zero. Class logits are
//! the visible mask area fraction times `logit_scale`.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{render_template, BackendDescriptor, RelevanceMap, VisionLanguageBackend, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::raster::{resize_bilinear, RgbImage};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockParams {
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub seed: u64,
    /// Multiplier turning visible-area fractions into logits.
    pub logit_scale: f64,
    /// When set, relevance is averaged over a `g x g` grid of cells before
    /// being upsampled, mimicking a patch-based model's coarse output.
    pub patch_grid: Option<usize>,
    pub template: String,
}

impl Default for MockParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            blur_radius: 0,
            seed: 0,
            logit_scale: 20.0,
            patch_grid: None,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

/// Ground truth the mock answers from: named boolean masks of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MockScene {
    shape: (usize, usize),
    categories: Vec<(String, Array2<bool>)>,
}

impl MockScene {
    pub fn new(categories: Vec<(String, Array2<bool>)>) -> Result<Self> {
        let Some((_, first)) = categories.first() else {
            return Ok(Self {
                shape: (0, 0),
                categories,
            });
        };
        let shape = first.dim();
        for (_, mask) in &categories {
            if mask.dim() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: mask.dim(),
                });
            }
        }
        Ok(Self { shape, categories })
    }

    /// Scene with no categories, answering zero relevance for any prompt.
    pub fn empty(shape: (usize, usize)) -> Self {
        Self {
            shape,
            categories: Vec::new(),
        }
    }

    /// Builds one mask per label `1..=names.len()` of a label map.
    pub fn from_labels(labels: &Array2<u8>, names: &[String]) -> Self {
        let categories = names
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), labels.mapv(|l| l as usize == i + 1)))
            .collect();
        Self {
            shape: labels.dim(),
            categories,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|(n, _)| n.as_str())
    }

    pub fn mask(&self, label: &str) -> Option<&Array2<bool>> {
        self.categories.iter().find(|(n, _)| n == label).map(|(_, m)| m)
    }
}

#[derive(Clone, Debug)]
pub struct MockBackend {
    scene: MockScene,
    params: MockParams,
    descriptor: BackendDescriptor,
}

pub fn mock_backend(scene: MockScene, noise_sigma: f64, blur_radius: usize, seed: u64) -> Result<MockBackend> {
    MockBackend::new(
        scene,
        MockParams {
            noise_sigma,
            blur_radius,
            seed,
            ..MockParams::default()
        },
    )
}

impl MockBackend {
    pub fn new(scene: MockScene, params: MockParams) -> Result<Self> {
        if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("mock noise_sigma must be finite and >= 0".into()));
        }
        if params.patch_grid == Some(0) {
            return Err(Error::InvalidArgument("mock patch_grid must be positive".into()));
        }
        let grid = params.patch_grid.unwrap_or(224);
        let resolution = if 224 % grid == 0 { 224 } else { grid };
        let descriptor = BackendDescriptor::new("mock", resolution, (grid, grid))?;
        Ok(Self {
            scene,
            params,
            descriptor,
        })
    }

    pub fn params(&self) -> &MockParams {
        &self.params
    }

    pub fn scene(&self) -> &MockScene {
        &self.scene
    }

    fn resolve(&self, prompt: &str) -> Option<&Array2<bool>> {
        self.scene
            .categories
            .iter()
            .find(|(label, _)| prompt == label || prompt == render_template(&self.params.template, label))
            .map(|(_, m)| m)
    }

    fn check_frame(&self, image: &RgbImage) -> Result<()> {
        let f = image.frame();
        let source = (f.source_height, f.source_width);
        if !self.scene.categories.is_empty() && source != self.scene.shape {
            return Err(Error::ShapeMismatch {
                expected: self.scene.shape,
                actual: source,
            });
        }
        Ok(())
    }

    /// The prompt's mask resampled into the raster's own coordinates.
    fn visible_mask(&self, image: &RgbImage, prompt: &str) -> Array2<f32> {
        let (h, w) = image.shape();
        match self.resolve(prompt) {
            None => Array2::zeros((h, w)),
            Some(mask) => {
                let frame = image.frame();
                Array2::from_shape_fn((h, w), |(r, c)| match frame.map(r, c) {
                    Some((sr, sc)) if mask[[sr, sc]] => 1.0,
                    _ => 0.0,
                })
            }
        }
    }
}

impl VisionLanguageBackend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn logits(&self, image: &RgbImage, prompts: &[String]) -> Result<Vec<f64>> {
        self.check_frame(image)?;
        let area = (image.height() * image.width()) as f64;
        Ok(prompts
            .iter()
            .map(|p| {
                let visible = self.visible_mask(image, p).sum() as f64;
                self.params.logit_scale * visible / area
            })
            .collect())
    }

    fn relevance(&self, image: &RgbImage, prompt: &str) -> Result<RelevanceMap> {
        self.check_frame(image)?;
        let (h, w) = image.shape();
        let mut scores = box_blur(&self.visible_mask(image, prompt), self.params.blur_radius);
        if let Some(grid) = self.params.patch_grid {
            scores = pool_and_upsample(&scores, grid);
        }
        if self.params.noise_sigma > 0.0 {
            let frame = image.frame();
            let content: Vec<u8> = image.pixels().iter().flat_map(|v| v.to_le_bytes()).collect();
            let noise_seed = seed::derive(
                self.params.seed,
                &[
                    &"mock-relevance",
                    &prompt,
                    &(frame.row_origin as u64),
                    &(frame.col_origin as u64),
                    &(frame.col_step as u64),
                    &h,
                    &w,
                    &content.as_slice(),
                ],
            );
            let mut rng = seed::rng(noise_seed);
            let normal = Normal::new(0.0, self.params.noise_sigma)
                .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
            scores.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
        }
        scores.mapv_inplace(|v| v.max(0.0));
        RelevanceMap::new(scores, prompt)
    }
}

/// Mean over the `(2r+1)^2` window clipped to the raster.
pub(crate) fn box_blur(src: &Array2<f32>, radius: usize) -> Array2<f32> {
    if radius == 0 {
        return src.clone();
    }
    let (h, w) = src.dim();
    // summed-area table
    let mut sat = Array2::<f64>::zeros((h + 1, w + 1));
    for r in 0..h {
        for c in 0..w {
            sat[[r + 1, c + 1]] = src[[r, c]] as f64 + sat[[r, c + 1]] + sat[[r + 1, c]] - sat[[r, c]];
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let r0 = r.saturating_sub(radius);
        let c0 = c.saturating_sub(radius);
        let r1 = (r + radius + 1).min(h);
        let c1 = (c + radius + 1).min(w);
        let total = sat[[r1, c1]] - sat[[r0, c1]] - sat[[r1, c0]] + sat[[r0, c0]];
        (total / ((r1 - r0) * (c1 - c0)) as f64) as f32
    })
}

fn pool_and_upsample(src: &Array2<f32>, grid: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let (gr, gc) = (grid.min(h), grid.min(w));
    let bounds = |i: usize, n: usize, len: usize| (i * len / n, (i + 1) * len / n);
    let pooled = Array2::from_shape_fn((gr, gc), |(i, j)| {
        let (r0, r1) = bounds(i, gr, h);
        let (c0, c1) = bounds(j, gc, w);
        let cell = src.slice(ndarray::s![r0..r1, c0..c1]);
        cell.iter().map(|&v| v as f64).sum::<f64>() as f32 / cell.len() as f32
    });
    resize_bilinear(&pooled, h, w)
}
