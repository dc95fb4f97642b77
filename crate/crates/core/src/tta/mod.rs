//! Test-time augmentation of relevance maps.
//!
//! Each category's map is computed on several views of the image (identity,
//! horizontal flip, a contrast change, and a grid of crops), calibrated
//! against distractor prompts, mapped back onto the original pixels, and
//! averaged. The crop grid as a whole counts as one view: its crops are
//! gated by the category's class probability and averaged per pixel over
//! the crops that cover it.

mod views;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use views::{make_views, CropBox, CropGridSpec, ViewKind, ViewRelevance, ViewTransform, CONTRAST_RANGE};

use crate::backend::{
    class_probabilities, normalize_masked, BackendDescriptor, PromptSet, RelevanceMap, VisionLanguageBackend,
};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Relevance of `prompt` on one view, expressed on the original image.
pub fn view_relevance(
    backend: &dyn VisionLanguageBackend,
    image: &RgbImage,
    prompt: &str,
    view: &ViewTransform,
) -> Result<ViewRelevance> {
    let seen = view.forward(image)?;
    let map = backend.relevance(&seen, prompt)?;
    view.backward_relevance(map.scores(), image.shape())
}

/// Subtracts the mean of `{map} ∪ distractors` from `map` and clips at 0.
/// With no distractors the map is returned unchanged.
pub fn calibrate(map: &RelevanceMap, distractors: &[RelevanceMap]) -> Result<RelevanceMap> {
    if distractors.is_empty() {
        return Ok(map.clone());
    }
    for d in distractors {
        if d.shape() != map.shape() {
            return Err(Error::ShapeMismatch {
                expected: map.shape(),
                actual: d.shape(),
            });
        }
    }
    let n = (distractors.len() + 1) as f64;
    let mut total = map.scores().mapv(f64::from);
    for d in distractors {
        Zip::from(&mut total).and(d.scores()).for_each(|t, &v| *t += f64::from(v));
    }
    let out = Zip::from(map.scores())
        .and(&total)
        .map_collect(|&v, &t| (f64::from(v) - t / n).max(0.0) as f32);
    RelevanceMap::new(out, map.category())
}

/// Running per-pixel sum of the crop contributions for one category.
#[derive(Clone, Debug, PartialEq)]
pub struct CropAccumulation {
    pub sum: Array2<f64>,
    pub counts: Array2<u32>,
    pub contributing: Vec<CropBox>,
}

impl CropAccumulation {
    fn new(shape: (usize, usize)) -> Self {
        Self {
            sum: Array2::zeros(shape),
            counts: Array2::zeros(shape),
            contributing: Vec::new(),
        }
    }

    fn add(&mut self, crop: CropBox, scores: &Array2<f32>) {
        let window = ndarray::s![crop.y..crop.y + crop.size, crop.x..crop.x + crop.size];
        Zip::from(self.sum.slice_mut(window))
            .and(self.counts.slice_mut(window))
            .and(scores)
            .for_each(|s, n, &v| {
                *s += f64::from(v);
                *n += 1;
            });
        self.contributing.push(crop);
    }

    /// Per-pixel average where covered, 0 elsewhere.
    pub fn mean(&self) -> Array2<f64> {
        Zip::from(&self.sum)
            .and(&self.counts)
            .map_collect(|&s, &n| if n > 0 { s / n as f64 } else { 0.0 })
    }

    pub fn covered(&self) -> Array2<bool> {
        self.counts.mapv(|n| n > 0)
    }

    /// Clips, then min-max normalizes over covered pixels.
    pub fn finish(&self, category: &str) -> CropAggregate {
        let mean = self.mean().mapv(|v| v.max(0.0));
        match normalize_masked(&mean, &self.covered()) {
            Some(scores) => CropAggregate {
                map: RelevanceMap::new(scores, category).expect("normalized scores are finite"),
                low_confidence: false,
                contributing: self.contributing.clone(),
            },
            None => CropAggregate {
                map: RelevanceMap::zeros(self.sum.dim(), category),
                low_confidence: true,
                contributing: self.contributing.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropAggregate {
    pub map: RelevanceMap,
    /// No crop passed the gate, or the aggregate was constant.
    pub low_confidence: bool,
    pub contributing: Vec<CropBox>,
}

/// Gated, calibrated crop-grid aggregation for one category, normalized.
pub fn aggregate_crops(
    backend: &dyn VisionLanguageBackend,
    image: &RgbImage,
    prompts: &PromptSet,
    category_index: usize,
    grid: &CropGridSpec,
) -> Result<CropAggregate> {
    let acc = accumulate_crops(backend, image, prompts, &[category_index], grid, true)?;
    Ok(acc[0].finish(&prompts.queries()[category_index]))
}

/// Raw crop-grid accumulation for each listed category (before
/// normalization). `calibrate` toggles distractor subtraction.
pub fn accumulate_crops(
    backend: &dyn VisionLanguageBackend,
    image: &RgbImage,
    prompts: &PromptSet,
    categories: &[usize],
    grid: &CropGridSpec,
    calibrate_maps: bool,
) -> Result<Vec<CropAccumulation>> {
    if let Some(&bad) = categories.iter().find(|&&c| c >= prompts.num_queries()) {
        return Err(Error::InvalidArgument(format!("category index {bad} out of range")));
    }
    let boxes = grid.boxes(image.height(), image.width())?;
    let queries = prompts.query_prompts();
    let distractors = prompts.distractor_prompts();

    // crops are independent; results are reduced below in grid order
    let per_crop: Vec<Vec<Option<Array2<f32>>>> = boxes
        .par_iter()
        .map(|b| -> Result<Vec<Option<Array2<f32>>>> {
            let crop = image.crop(b.y, b.x, b.size, b.size)?;
            let probs = class_probabilities(backend, &crop, prompts)?;
            let passing: Vec<bool> = categories.iter().map(|&c| probs[c] > grid.gate_threshold).collect();
            if !passing.iter().any(|&p| p) {
                return Ok(vec![None; categories.len()]);
            }
            let distractor_maps = if calibrate_maps {
                distractors
                    .iter()
                    .map(|d| backend.relevance(&crop, d))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            categories
                .iter()
                .zip(&passing)
                .map(|(&c, &pass)| {
                    if !pass {
                        return Ok(None);
                    }
                    let map = backend.relevance(&crop, &queries[c])?;
                    let map = calibrate(&map, &distractor_maps)?;
                    if map.shape() != (b.size, b.size) {
                        return Err(Error::ShapeMismatch {
                            expected: (b.size, b.size),
                            actual: map.shape(),
                        });
                    }
                    Ok(Some(map.into_scores()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut out = vec![CropAccumulation::new(image.shape()); categories.len()];
    for (b, maps) in boxes.iter().zip(per_crop) {
        for (acc, map) in out.iter_mut().zip(maps) {
            if let Some(scores) = map {
                acc.add(*b, &scores);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub views: Vec<ViewKind>,
    pub grid: CropGridSpec,
    pub seed: u64,
    /// Subtract the distractor mean from every per-view map.
    pub calibrate: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            views: ViewKind::ALL.to_vec(),
            grid: CropGridSpec::default(),
            seed: 0,
            calibrate: true,
        }
    }
}

/// View-averaged, normalized relevance for every query category.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedRelevance {
    pub maps: Vec<RelevanceMap>,
    pub low_confidence: Vec<bool>,
    pub views: Vec<ViewKind>,
    pub distractors: Vec<String>,
    pub grid: CropGridSpec,
    pub seed: u64,
    pub backend: BackendDescriptor,
}

impl RefinedRelevance {
    pub fn shape(&self) -> (usize, usize) {
        self.maps.first().map(RelevanceMap::shape).unwrap_or((0, 0))
    }

    pub fn categories(&self) -> Vec<String> {
        self.maps.iter().map(|m| m.category().to_string()).collect()
    }

    pub fn num_categories(&self) -> usize {
        self.maps.len()
    }
}

/// Averages the calibrated per-view maps of every category.
///
/// Views whose map is constant for a category are left out of that
/// category's average. A category with no usable view is emitted as an
/// all-zero map flagged low-confidence; if that happens to every category
/// the call fails with [`Error::NoSignal`].
pub fn refine(
    backend: &dyn VisionLanguageBackend,
    image: &RgbImage,
    prompts: &PromptSet,
    options: &RefineOptions,
) -> Result<RefinedRelevance> {
    options.grid.validate()?;
    let views = make_views(image, &options.views, &options.grid, options.seed)?;
    let k = prompts.num_queries();
    let shape = image.shape();
    let queries = prompts.query_prompts();
    let distractors = prompts.distractor_prompts();

    let mut sums = vec![Array2::<f64>::zeros(shape); k];
    let mut used = vec![0usize; k];

    let whole_image: Vec<&ViewTransform> = views.iter().filter(|v| v.kind() != ViewKind::Crop).collect();
    let per_view: Vec<Vec<Option<Array2<f32>>>> = whole_image
        .par_iter()
        .map(|view| -> Result<Vec<Option<Array2<f32>>>> {
            let seen = view.forward(image)?;
            let distractor_maps = if options.calibrate {
                distractors
                    .iter()
                    .map(|d| backend.relevance(&seen, d))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            queries
                .iter()
                .map(|q| {
                    let map = calibrate(&backend.relevance(&seen, q)?, &distractor_maps)?;
                    let back = view.backward_relevance(map.scores(), shape)?;
                    Ok(normalize_masked(&back.scores.mapv(f64::from), &back.valid))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    for maps in per_view {
        for (c, map) in maps.into_iter().enumerate() {
            if let Some(map) = map {
                Zip::from(&mut sums[c]).and(&map).for_each(|s, &v| *s += f64::from(v));
                used[c] += 1;
            }
        }
    }

    if options.views.contains(&ViewKind::Crop) {
        let all: Vec<usize> = (0..k).collect();
        let accs = accumulate_crops(backend, image, prompts, &all, &options.grid, options.calibrate)?;
        for (c, acc) in accs.iter().enumerate() {
            let agg = acc.finish(&prompts.queries()[c]);
            if !agg.low_confidence {
                Zip::from(&mut sums[c]).and(agg.map.scores()).for_each(|s, &v| *s += f64::from(v));
                used[c] += 1;
            }
        }
    }

    let all_valid = Array2::from_elem(shape, true);
    let mut maps = Vec::with_capacity(k);
    let mut low_confidence = Vec::with_capacity(k);
    for c in 0..k {
        let label = &prompts.queries()[c];
        let normalized = (used[c] > 0)
            .then(|| normalize_masked(&sums[c].mapv(|s| s / used[c] as f64), &all_valid))
            .flatten();
        match normalized {
            Some(scores) => {
                maps.push(RelevanceMap::new(scores, label.as_str())?);
                low_confidence.push(false);
            }
            None => {
                maps.push(RelevanceMap::zeros(shape, label.as_str()));
                low_confidence.push(true);
            }
        }
    }
    if low_confidence.iter().all(|&l| l) {
        return Err(Error::NoSignal);
    }

    let mut view_kinds = options.views.clone();
    view_kinds.sort();
    view_kinds.dedup();
    Ok(RefinedRelevance {
        maps,
        low_confidence,
        views: view_kinds,
        distractors: prompts.distractors().to_vec(),
        grid: options.grid,
        seed: options.seed,
        backend: backend.descriptor().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{mock_backend, MockScene};

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn map(values: Array2<f32>) -> RelevanceMap {
        RelevanceMap::new(values, "q").unwrap()
    }

    #[test]
    fn calibrate_with_zero_distractors_scales() {
        let m = map(Array2::from_shape_fn((3, 3), |(r, c)| (r + c) as f32 / 4.0));
        let zeros = vec![map(Array2::zeros((3, 3))); 3];
        let out = calibrate(&m, &zeros).unwrap();
        for (o, v) in out.scores().iter().zip(m.scores()) {
            assert!((o - (v - v / 4.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn calibrate_against_identical_maps_is_zero() {
        let m = map(Array2::from_shape_fn((3, 3), |(r, _)| r as f32));
        let out = calibrate(&m, &[m.clone(), m.clone()]).unwrap();
        assert!(out.scores().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn calibrate_disjoint_regions() {
        let a = map(Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 1.0 } else { 0.0 }));
        let b = map(Array2::from_shape_fn((4, 4), |(r, _)| if r >= 3 { 1.0 } else { 0.0 }));
        let out = calibrate(&a, std::slice::from_ref(&b)).unwrap();
        // per-pixel oracle: a - (a + b) / 2, clipped
        for ((r, c), &v) in out.scores().indexed_iter() {
            let expected = (a.scores()[[r, c]] - (a.scores()[[r, c]] + b.scores()[[r, c]]) / 2.0).max(0.0);
            assert_eq!(v, expected);
        }
        assert_eq!(out.scores()[[0, 0]], 0.5);
        assert_eq!(out.scores()[[3, 0]], 0.0);
    }

    #[test]
    fn calibrate_without_distractors_is_identity() {
        let m = map(Array2::from_elem((2, 2), 0.7));
        assert_eq!(calibrate(&m, &[]).unwrap(), m);
        assert!(calibrate(&m, &[map(Array2::zeros((3, 2)))]).is_err());
    }

    fn scene() -> MockScene {
        let a = Array2::from_shape_fn((16, 16), |(r, c)| (3..9).contains(&r) && (2..8).contains(&c));
        let b = Array2::from_shape_fn((16, 16), |(r, c)| (9..14).contains(&r) && (8..15).contains(&c));
        MockScene::new(vec![("a".into(), a), ("b".into(), b)]).unwrap()
    }

    fn image() -> RgbImage {
        RgbImage::filled(16, 16, [0.4; 3]).unwrap()
    }

    #[test]
    fn identity_view_matches_direct_relevance() {
        let backend = mock_backend(scene(), 0.1, 1, 3).unwrap();
        let direct = backend.relevance(&image(), "a").unwrap();
        let via = view_relevance(&backend, &image(), "a", &ViewTransform::Identity).unwrap();
        assert_eq!(&via.scores, direct.scores());
        assert!(via.valid.iter().all(|&v| v));
    }

    #[test]
    fn hflip_view_is_reflipped_relevance_of_flipped_image() {
        let backend = mock_backend(scene(), 0.1, 1, 3).unwrap();
        let flipped = backend.relevance(&image().hflip(), "b").unwrap();
        let via = view_relevance(&backend, &image(), "b", &ViewTransform::Hflip).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(via.scores[[r, c]], flipped.scores()[[r, 15 - c]]);
            }
        }
    }

    #[test]
    fn whole_image_crop_is_normalized_single_term() {
        let backend = mock_backend(scene(), 0.05, 1, 9).unwrap();
        let prompts = PromptSet::with_default_distractors(labels(&["a", "b"])).unwrap();
        let grid = CropGridSpec {
            crop_size: 16,
            stride: 16,
            gate_threshold: 0.0,
        };
        let agg = aggregate_crops(&backend, &image(), &prompts, 0, &grid).unwrap();
        assert!(!agg.low_confidence);
        let raw = backend.relevance(&image(), &prompts.query_prompts()[0]).unwrap();
        let dist: Vec<_> = prompts
            .distractor_prompts()
            .iter()
            .map(|d| backend.relevance(&image(), d).unwrap())
            .collect();
        let expected = calibrate(&raw, &dist).unwrap().normalized().unwrap();
        for (a, b) in agg.map.scores().iter().zip(expected.scores()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_gate_yields_low_confidence_zeros() {
        let backend = mock_backend(scene(), 0.0, 0, 0).unwrap();
        let prompts = PromptSet::with_default_distractors(labels(&["a", "b"])).unwrap();
        let grid = CropGridSpec {
            crop_size: 8,
            stride: 4,
            gate_threshold: 0.99999,
        };
        let agg = aggregate_crops(&backend, &image(), &prompts, 0, &grid).unwrap();
        assert!(agg.low_confidence);
        assert!(agg.contributing.is_empty());
        assert!(agg.map.scores().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_identity_only_is_normalized_calibrated_map() {
        let backend = mock_backend(scene(), 0.0, 1, 0).unwrap();
        let prompts = PromptSet::with_default_distractors(labels(&["a", "b"])).unwrap();
        let options = RefineOptions {
            views: vec![ViewKind::Identity],
            ..RefineOptions::default()
        };
        let refined = refine(&backend, &image(), &prompts, &options).unwrap();
        let raw = backend.relevance(&image(), &prompts.query_prompts()[1]).unwrap();
        let dist: Vec<_> = prompts
            .distractor_prompts()
            .iter()
            .map(|d| backend.relevance(&image(), d).unwrap())
            .collect();
        let expected = calibrate(&raw, &dist).unwrap().normalized().unwrap();
        for (a, b) in refined.maps[1].scores().iter().zip(expected.scores()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(refined.categories(), labels(&["a", "b"]));
    }

    #[test]
    fn refine_without_signal_fails() {
        let backend = mock_backend(MockScene::empty((16, 16)), 0.0, 0, 0).unwrap();
        let prompts = PromptSet::with_default_distractors(labels(&["ghost"])).unwrap();
        let err = refine(&backend, &image(), &prompts, &RefineOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoSignal));
    }

    #[test]
    fn absent_category_is_flagged_but_others_survive() {
        let backend = mock_backend(scene(), 0.0, 0, 0).unwrap();
        let prompts = PromptSet::with_default_distractors(labels(&["a", "ghost"])).unwrap();
        let refined = refine(&backend, &image(), &prompts, &RefineOptions::default()).unwrap();
        assert_eq!(refined.low_confidence, vec![false, true]);
        assert!(refined.maps[1].scores().iter().all(|&v| v == 0.0));
    }
}
