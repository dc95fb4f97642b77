//! Vision-language backends.
//!
//! A backend answers two questions about an RGB raster: how well each text
//! prompt matches the whole image ([`VisionLanguageBackend::logits`]) and
//! which pixels explain a prompt ([`VisionLanguageBackend::relevance`]).
//! Everything downstream talks to backends only through this trait, so real
//! models and the deterministic [`MockBackend`] are interchangeable.

mod mock;
mod registry;

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use mock::{mock_backend, MockBackend, MockParams, MockScene};
pub use registry::{BackendConfig, BackendFactory, BackendRegistry, SceneContext};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const DEFAULT_TEMPLATE: &str = "a photo of a {label}";

/// Distractor labels used when the caller supplies none.
pub const DEFAULT_DISTRACTORS: [&str; 5] = ["bird", "cat", "boat", "bus", "person"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// Side of the square input the model consumes.
    pub input_resolution: usize,
    /// Native `(rows, cols)` resolution of relevance before upsampling.
    pub patch_grid: (usize, usize),
}

impl BackendDescriptor {
    pub fn new(name: impl Into<String>, input_resolution: usize, patch_grid: (usize, usize)) -> Result<Self> {
        let d = Self {
            name: name.into(),
            input_resolution,
            patch_grid,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let (gr, gc) = self.patch_grid;
        if self.input_resolution == 0 || gr == 0 || gc == 0 {
            return Err(Error::InvalidArgument(format!(
                "backend {:?}: resolution and patch grid must be positive",
                self.name
            )));
        }
        if self.input_resolution % gr != 0 || self.input_resolution % gc != 0 {
            return Err(Error::InvalidArgument(format!(
                "backend {:?}: patch grid {:?} does not divide {}",
                self.name, self.patch_grid, self.input_resolution
            )));
        }
        Ok(())
    }
}

/// Query categories, distractor categories, and the template that turns a
/// bare label into a prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    queries: Vec<String>,
    distractors: Vec<String>,
    template: String,
}

impl PromptSet {
    pub fn new(queries: Vec<String>, distractors: Vec<String>, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if queries.is_empty() {
            return Err(Error::InvalidPrompts("at least one query category is required".into()));
        }
        let mut seen = BTreeSet::new();
        for q in &queries {
            if q.trim().is_empty() {
                return Err(Error::InvalidPrompts("empty query label".into()));
            }
            if !seen.insert(q.as_str()) {
                return Err(Error::InvalidPrompts(format!("duplicate query {q:?}")));
            }
        }
        let mut seen_distractors = BTreeSet::new();
        for d in &distractors {
            if d.trim().is_empty() {
                return Err(Error::InvalidPrompts("empty distractor label".into()));
            }
            if seen.contains(d.as_str()) {
                return Err(Error::InvalidPrompts(format!("distractor {d:?} is also a query")));
            }
            if !seen_distractors.insert(d.as_str()) {
                return Err(Error::InvalidPrompts(format!("duplicate distractor {d:?}")));
            }
        }
        if !template.contains("{label}") {
            return Err(Error::InvalidPrompts(format!("template {template:?} lacks a {{label}} slot")));
        }
        Ok(Self {
            queries,
            distractors,
            template,
        })
    }

    /// Uses [`DEFAULT_DISTRACTORS`] minus any label that is also a query.
    pub fn with_default_distractors(queries: Vec<String>) -> Result<Self> {
        let distractors = DEFAULT_DISTRACTORS
            .iter()
            .filter(|d| !queries.iter().any(|q| q == *d))
            .map(|d| d.to_string())
            .collect();
        Self::new(queries, distractors, DEFAULT_TEMPLATE)
    }

    pub fn queries(&self) -> &[String] {
        &self.queries
    }

    pub fn distractors(&self) -> &[String] {
        &self.distractors
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn render(&self, label: &str) -> String {
        render_template(&self.template, label)
    }

    pub fn query_prompts(&self) -> Vec<String> {
        self.queries.iter().map(|q| self.render(q)).collect()
    }

    pub fn distractor_prompts(&self) -> Vec<String> {
        self.distractors.iter().map(|d| self.render(d)).collect()
    }

    /// Queries followed by distractors, rendered.
    pub fn all_prompts(&self) -> Vec<String> {
        let mut all = self.query_prompts();
        all.extend(self.distractor_prompts());
        all
    }
}

pub fn render_template(template: &str, label: &str) -> String {
    template.replace("{label}", label)
}

/// Per-pixel evidence for one prompt. Values are finite; after
/// [`RelevanceMap::normalized`] they lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    scores: Array2<f32>,
    category: String,
}

impl RelevanceMap {
    pub fn new(scores: Array2<f32>, category: impl Into<String>) -> Result<Self> {
        let category = category.into();
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteRelevance { prompt: category });
        }
        Ok(Self { scores, category })
    }

    pub fn zeros(shape: (usize, usize), category: impl Into<String>) -> Self {
        Self {
            scores: Array2::zeros(shape),
            category: category.into(),
        }
    }

    pub fn scores(&self) -> &Array2<f32> {
        &self.scores
    }

    pub fn into_scores(self) -> Array2<f32> {
        self.scores
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn shape(&self) -> (usize, usize) {
        self.scores.dim()
    }

    /// Min-max rescaling to `[0, 1]`; `None` for a constant map.
    pub fn normalized(&self) -> Option<Self> {
        let valid = Array2::from_elem(self.shape(), true);
        let values = self.scores.mapv(f64::from);
        normalize_masked(&values, &valid).map(|scores| Self {
            scores,
            category: self.category.clone(),
        })
    }
}

/// Min-max normalizes the pixels where `valid` holds; other pixels become 0.
/// Returns `None` when no pixel is valid or the valid range is degenerate.
pub fn normalize_masked(values: &Array2<f64>, valid: &Array2<bool>) -> Option<Array2<f32>> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &ok) in values.iter().zip(valid.iter()) {
        if ok {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() || hi - lo <= 1e-9 * hi.abs().max(1.0) {
        return None;
    }
    let span = hi - lo;
    let mut out = Array2::zeros(values.dim());
    ndarray::Zip::from(&mut out)
        .and(values)
        .and(valid)
        .for_each(|o, &v, &ok| {
            if ok {
                *o = ((v - lo) / span).clamp(0.0, 1.0) as f32;
            }
        });
    Some(out)
}

pub trait VisionLanguageBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Image-text similarity logits, one per prompt, already scaled by the
    /// backend's temperature so that a softmax yields class probabilities.
    fn logits(&self, image: &RgbImage, prompts: &[String]) -> Result<Vec<f64>>;

    /// Relevance of every pixel of `image` for `prompt`, at image size.
    fn relevance(&self, image: &RgbImage, prompt: &str) -> Result<RelevanceMap>;

    /// Dense features from the image tower, `(height, width, channels)` at
    /// any resolution. Backends without an image tower return `None`.
    fn dense_features(&self, _image: &RgbImage) -> Result<Option<Array3<f32>>> {
        Ok(None)
    }
}

/// Softmax over `queries ∪ distractors`, in [`PromptSet::all_prompts`] order.
pub fn class_probabilities(
    backend: &dyn VisionLanguageBackend,
    image: &RgbImage,
    prompts: &PromptSet,
) -> Result<Vec<f64>> {
    let rendered = prompts.all_prompts();
    let logits = backend.logits(image, &rendered)?;
    if logits.len() != rendered.len() {
        return Err(Error::BackendUnavailable(format!(
            "backend returned {} logits for {} prompts",
            logits.len(),
            rendered.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::BackendUnavailable("backend returned non-finite logits".into()));
    }
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_set_rejects_bad_inputs() {
        assert!(PromptSet::new(vec![], vec![], DEFAULT_TEMPLATE).is_err());
        assert!(PromptSet::new(labels(&["a", "a"]), vec![], DEFAULT_TEMPLATE).is_err());
        assert!(PromptSet::new(labels(&["a"]), labels(&["a"]), DEFAULT_TEMPLATE).is_err());
        assert!(PromptSet::new(labels(&["a"]), vec![], "no slot").is_err());
    }

    #[test]
    fn default_distractors_exclude_queries() {
        let p = PromptSet::with_default_distractors(labels(&["cat", "sofa"])).unwrap();
        assert_eq!(p.distractors(), labels(&["bird", "boat", "bus", "person"]).as_slice());
        assert_eq!(p.render("sofa"), "a photo of a sofa");
        assert_eq!(p.all_prompts().len(), 6);
    }

    #[test]
    fn descriptor_grid_must_divide_resolution() {
        assert!(BackendDescriptor::new("clip", 224, (7, 7)).is_ok());
        assert!(BackendDescriptor::new("bad", 224, (5, 5)).is_err());
        assert!(BackendDescriptor::new("bad", 0, (1, 1)).is_err());
    }

    #[test]
    fn singleton_softmax_is_one() {
        assert_eq!(softmax(&[3.7]), vec![1.0]);
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn non_finite_relevance_is_an_error() {
        let mut scores = Array2::zeros((2, 2));
        scores[[0, 1]] = f32::NAN;
        assert!(matches!(
            RelevanceMap::new(scores, "x"),
            Err(Error::NonFiniteRelevance { .. })
        ));
    }

    #[test]
    fn masked_normalization_ignores_invalid_pixels() {
        let values = ndarray::array![[5.0, 2.0], [3.0, 100.0]];
        let valid = ndarray::array![[true, true], [true, false]];
        let out = normalize_masked(&values, &valid).unwrap();
        assert_eq!(out, ndarray::array![[1.0f32, 0.0], [1.0 / 3.0, 0.0]]);
        assert!(normalize_masked(&Array2::from_elem((2, 2), 0.3), &Array2::from_elem((2, 2), true)).is_none());
    }
}
