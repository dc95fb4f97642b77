//! Click-driven segmentation with machine-generated clicks.
//!
//! Positive clicks for a category are drawn from its relevance channel,
//! negative clicks from the background channel; each category is segmented
//! separately and the binary masks are merged into one label mask.

mod mock;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::SceneContext;
use crate::error::{Error, Result};
use crate::fusion::{self, MultiClassRelevance, Pixel};
use crate::mask::SegmentationMask;
use crate::raster::RgbImage;
use crate::seed;

pub use mock::MockClickSegmenter;

/// Draws this many replacement negatives before giving up on a colliding one.
pub const MAX_RESAMPLES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickPlan {
    /// Channel index the positives were drawn from (`1..=K`).
    pub category: usize,
    pub positives: Vec<Pixel>,
    pub negatives: Vec<Pixel>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub mask: Array2<bool>,
    pub confidence: Array2<f32>,
}

impl BinaryMask {
    /// Operating point at confidence 0.5.
    pub fn from_confidence(confidence: Array2<f32>) -> Self {
        Self {
            mask: confidence.mapv(|v| v >= 0.5),
            confidence,
        }
    }

    pub fn empty(shape: (usize, usize)) -> Self {
        Self::from_confidence(Array2::zeros(shape))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// Samples `n_pos` positives from channel `category` and `n_neg` negatives
/// from the background channel. Negatives that land on a positive are
/// redrawn up to [`MAX_RESAMPLES`] times and dropped after that.
pub fn plan_clicks(
    relevance: &MultiClassRelevance,
    category: usize,
    n_pos: usize,
    n_neg: usize,
    tau: f64,
    seed: u64,
) -> Result<ClickPlan> {
    if n_pos == 0 {
        return Err(Error::InvalidArgument("at least one positive click is required".into()));
    }
    let channel = relevance
        .channel(category)
        .filter(|_| category > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("no category channel {category}")))?;
    if channel.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyChannel(category));
    }
    let positives: Vec<Pixel> = fusion::sample(relevance, category, n_pos, tau, seed::derive(seed, &[&"pos"]))?
        .samples
        .iter()
        .map(|s| s.pixel)
        .collect();
    let mut negatives = Vec::with_capacity(n_neg);
    let background_empty = relevance.background().iter().all(|&v| v == 0.0);
    if n_neg > 0 && background_empty {
        log::warn!("background channel is empty; planning without negative clicks");
    } else if n_neg > 0 {
        let first = fusion::sample(relevance, 0, n_neg, tau, seed::derive(seed, &[&"neg"]))?;
        for (i, s) in first.samples.iter().enumerate() {
            let mut pixel = Some(s.pixel).filter(|p| !positives.contains(p));
            for attempt in 0..MAX_RESAMPLES {
                if pixel.is_some() {
                    break;
                }
                let redraw = fusion::sample(relevance, 0, 1, tau, seed::derive(seed, &[&"neg", &i, &attempt]))?;
                pixel = Some(redraw.samples[0].pixel).filter(|p| !positives.contains(p));
            }
            match pixel {
                Some(p) => negatives.push(p),
                None => log::warn!("dropping negative click {i}: it keeps colliding with a positive"),
            }
        }
    }
    Ok(ClickPlan {
        category,
        positives,
        negatives,
        seed,
    })
}

/// A point-prompted segmenter.
pub trait InteractiveSegmenter: Send {
    fn set_image(&mut self, image: &RgbImage) -> Result<()>;
    fn click(&mut self, pixel: Pixel, positive: bool) -> Result<()>;
    /// Soft output after the clicks so far.
    fn result(&self) -> Result<BinaryMask>;
    fn reset(&mut self);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub pixel: Pixel,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickTranscript {
    pub category: usize,
    pub name: String,
    pub seed: u64,
    pub clicks: Vec<ClickEvent>,
}

/// Submits positives then negatives and returns the model's final output.
pub fn segment_category(
    model: &mut dyn InteractiveSegmenter,
    image: &RgbImage,
    plan: &ClickPlan,
) -> Result<(BinaryMask, Vec<ClickEvent>)> {
    if plan.positives.is_empty() {
        return Err(Error::InvalidArgument("a click plan needs at least one positive".into()));
    }
    let (h, w) = image.shape();
    model.reset();
    model.set_image(image)?;
    let mut events = Vec::new();
    let ordered = plan
        .positives
        .iter()
        .map(|&p| (p, true))
        .chain(plan.negatives.iter().map(|&p| (p, false)));
    for (pixel, positive) in ordered {
        if pixel.x >= w || pixel.y >= h {
            return Err(Error::InvalidArgument(format!("click ({}, {}) out of bounds", pixel.x, pixel.y)));
        }
        model.click(pixel, positive)?;
        events.push(ClickEvent { pixel, positive });
    }
    let out = model.result()?;
    if out.shape() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: (h, w),
            actual: out.shape(),
        });
    }
    Ok((out, events))
}

/// Each pixel takes the category of its most confident covering mask, ties
/// to the lower category; uncovered pixels are background. Categories are
/// 1-based indices into `categories`.
pub fn merge(masks: &[(usize, BinaryMask)], categories: Vec<String>) -> Result<SegmentationMask> {
    let Some((_, first)) = masks.first() else {
        return Err(Error::InvalidArgument("nothing to merge".into()));
    };
    let shape = first.shape();
    let mut ordered: Vec<&(usize, BinaryMask)> = masks.iter().collect();
    ordered.sort_by_key(|(c, _)| *c);
    let mut labels = Array2::<u8>::zeros(shape);
    let mut best = Array2::<f32>::from_elem(shape, f32::NEG_INFINITY);
    for (category, m) in ordered {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: m.shape(),
            });
        }
        let label = u8::try_from(*category)
            .ok()
            .filter(|&l| l >= 1 && l as usize <= categories.len())
            .ok_or_else(|| Error::InvalidArgument(format!("category {category} out of range")))?;
        ndarray::Zip::from(&mut labels)
            .and(&mut best)
            .and(&m.mask)
            .and(&m.confidence)
            .for_each(|l, b, &covered, &conf| {
                if covered && conf > *b {
                    *l = label;
                    *b = conf;
                }
            });
    }
    SegmentationMask::new(labels, categories)
}

/// One full-confidence binary mask per category present in `mask`.
pub fn split(mask: &SegmentationMask) -> Vec<(usize, BinaryMask)> {
    (1..=mask.num_categories())
        .map(|c| {
            let conf = mask.labels().mapv(|l| if l as usize == c { 1.0 } else { 0.0 });
            (c, BinaryMask::from_confidence(conf))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickConfig {
    pub positives: usize,
    /// Defaults to the number of positives.
    pub negatives: Option<usize>,
    pub tau: f64,
    pub model: String,
    pub weights: Option<PathBuf>,
}

impl Default for ClickConfig {
    fn default() -> Self {
        Self {
            positives: 3,
            negatives: None,
            tau: 0.05,
            model: "mock".into(),
            weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InteractiveOutcome {
    pub mask: SegmentationMask,
    pub transcripts: Vec<ClickTranscript>,
    /// Categories skipped because their relevance was empty.
    pub skipped: Vec<usize>,
}

/// Plans clicks for every category, segments each one and merges the
/// results.
pub fn segment_image(
    model: &mut dyn InteractiveSegmenter,
    image: &RgbImage,
    relevance: &MultiClassRelevance,
    cfg: &ClickConfig,
    seed: u64,
) -> Result<InteractiveOutcome> {
    let shape = image.shape();
    if relevance.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: relevance.shape(),
        });
    }
    let mut masks = Vec::new();
    let mut transcripts = Vec::new();
    let mut skipped = Vec::new();
    for c in 1..=relevance.num_categories() {
        let plan = match plan_clicks(
            relevance,
            c,
            cfg.positives,
            cfg.negatives.unwrap_or(cfg.positives),
            cfg.tau,
            seed::derive(seed, &[&"clicks", &c]),
        ) {
            Err(Error::EmptyChannel(_)) => {
                skipped.push(c);
                masks.push((c, BinaryMask::empty(shape)));
                continue;
            }
            other => other?,
        };
        let (mask, clicks) = segment_category(model, image, &plan)?;
        transcripts.push(ClickTranscript {
            category: c,
            name: relevance.categories()[c - 1].clone(),
            seed: plan.seed,
            clicks,
        });
        masks.push((c, mask));
    }
    Ok(InteractiveOutcome {
        mask: merge(&masks, relevance.categories().to_vec())?,
        transcripts,
        skipped,
    })
}

pub type SegmenterFactory =
    Box<dyn Fn(&ClickConfig, &SceneContext) -> Result<Box<dyn InteractiveSegmenter>> + Send + Sync>;

/// Interactive models keyed by name.
pub struct SegmenterRegistry {
    factories: BTreeMap<String, SegmenterFactory>,
}

impl SegmenterRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding the built-in `mock` region grower.
    pub fn standard() -> Self {
        let mut registry = Self::empty();
        registry.register("mock", |_, context| {
            let scene = context.scene.clone().ok_or_else(|| {
                Error::ModelUnavailable("the mock click segmenter needs a ground-truth scene".into())
            })?;
            Ok(Box::new(MockClickSegmenter::new(scene)))
        });
        registry
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&ClickConfig, &SceneContext) -> Result<Box<dyn InteractiveSegmenter>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, config: &ClickConfig, context: &SceneContext) -> Result<Box<dyn InteractiveSegmenter>> {
        let factory = self.factories.get(&config.model).ok_or_else(|| {
            let known: Vec<&str> = self.factories.keys().map(String::as_str).collect();
            Error::ModelUnavailable(format!("unknown interactive model {:?} (known: {})", config.model, known.join(", ")))
        })?;
        factory(config, context)
    }
}
