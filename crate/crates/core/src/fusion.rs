//! Multi-class relevance, pseudo-label sampling, and direct binarization.
//!
//! Channel `0` is background, derived as `1 - max_c SS[c]`; channels
//! `1..=K` are the refined per-category maps.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;
use crate::seed;
use crate::tta::RefinedRelevance;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiClassRelevance {
    categories: Vec<String>,
    /// `(K, height, width)`
    channels: Array3<f32>,
    background: Array2<f32>,
    low_confidence: Vec<bool>,
}

impl MultiClassRelevance {
    pub fn from_channels(categories: Vec<String>, maps: Vec<Array2<f32>>) -> Result<Self> {
        let low_confidence = maps.iter().map(|m| m.iter().all(|&v| v == 0.0)).collect();
        Self::build(categories, maps, low_confidence)
    }

    fn build(categories: Vec<String>, maps: Vec<Array2<f32>>, low_confidence: Vec<bool>) -> Result<Self> {
        if maps.is_empty() || maps.len() != categories.len() {
            return Err(Error::InvalidArgument(format!(
                "{} maps for {} categories",
                maps.len(),
                categories.len()
            )));
        }
        let shape = maps[0].dim();
        let mut channels = Array3::zeros((maps.len(), shape.0, shape.1));
        for (k, m) in maps.iter().enumerate() {
            if m.dim() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: m.dim(),
                });
            }
            if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!("channel {} leaves [0, 1]", k + 1)));
            }
            channels.index_axis_mut(Axis(0), k).assign(m);
        }
        let background = channels
            .map_axis(Axis(0), |px| 1.0 - px.iter().copied().fold(0.0f32, f32::max))
            .mapv(|v| v.max(0.0));
        Ok(Self {
            categories,
            channels,
            background,
            low_confidence,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.background.dim()
    }

    pub fn background(&self) -> &Array2<f32> {
        &self.background
    }

    /// Channel `0` is background, `c >= 1` the category maps.
    pub fn channel(&self, c: usize) -> Option<ArrayView2<'_, f32>> {
        match c {
            0 => Some(self.background.view()),
            c if c <= self.num_categories() => Some(self.channels.index_axis(Axis(0), c - 1)),
            _ => None,
        }
    }

    pub fn is_low_confidence(&self, c: usize) -> bool {
        c > 0 && self.low_confidence.get(c - 1).copied().unwrap_or(true)
    }
}

/// Stacks the refined maps and derives the background channel.
pub fn fuse(refined: &RefinedRelevance) -> Result<MultiClassRelevance> {
    MultiClassRelevance::build(
        refined.categories(),
        refined.maps.iter().map(|m| m.scores().clone()).collect(),
        refined.low_confidence.clone(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub pixel: Pixel,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub samples: Vec<PseudoLabel>,
    pub tau: f64,
    pub seed: u64,
    /// The sampled map was all zero, so samples are uniform.
    pub low_confidence: bool,
}

/// Per-pixel probabilities `softmax(map / tau)` in row-major order.
pub fn sampling_distribution(map: ArrayView2<'_, f32>, tau: f64) -> Vec<f64> {
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = map.iter().map(|&v| ((v as f64 - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// `relative * (max - min)` of the map, or `relative` for a constant map.
pub fn relative_tau(map: ArrayView2<'_, f32>, relative: f64) -> f64 {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo) as f64;
    if range > 0.0 {
        relative * range
    } else {
        relative
    }
}

/// Draws `n` pixels i.i.d. from `softmax(map / tau)`, all tagged `label`.
pub fn sample_map(map: ArrayView2<'_, f32>, label: u8, n: usize, tau: f64, seed: u64) -> Result<PseudoLabelBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (_, width) = map.dim();
    let low_confidence = map.iter().all(|&v| v == 0.0);
    let probs = sampling_distribution(map, tau);
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
    let mut rng = seed::rng(seed);
    let samples = (0..n)
        .map(|_| {
            let i = dist.sample(&mut rng);
            PseudoLabel {
                pixel: Pixel::new(i % width, i / width),
                label,
            }
        })
        .collect();
    Ok(PseudoLabelBatch {
        samples,
        tau,
        seed,
        low_confidence,
    })
}

/// Pseudo-labels for channel `category` (0 = background).
pub fn sample(
    relevance: &MultiClassRelevance,
    category: usize,
    n: usize,
    tau: f64,
    seed: u64,
) -> Result<PseudoLabelBatch> {
    let map = relevance
        .channel(category)
        .ok_or_else(|| Error::InvalidArgument(format!("no channel {category}")))?;
    sample_map(map, category as u8, n, tau, seed)
}

/// Pure per-pixel argmax over category channels, labels `1..=K`; ties go to
/// the lower index.
pub fn argmax_labels(relevance: &MultiClassRelevance) -> Array2<u8> {
    relevance.channels.map_axis(Axis(0), |px| {
        let mut best = 0;
        for (k, &v) in px.iter().enumerate() {
            if v > px[best] {
                best = k;
            }
        }
        best as u8 + 1
    })
}

/// Argmax label where its score exceeds `threshold` and beats the
/// background channel, background elsewhere.
pub fn binarize(relevance: &MultiClassRelevance, threshold: f64) -> Result<SegmentationMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let argmax = argmax_labels(relevance);
    let mut labels = Array2::zeros(relevance.shape());
    for ((r, c), &label) in argmax.indexed_iter() {
        let score = relevance.channels[[label as usize - 1, r, c]];
        if score as f64 > threshold && score > relevance.background[[r, c]] {
            labels[[r, c]] = label;
        }
    }
    SegmentationMask::new(labels, relevance.categories.clone())
}
