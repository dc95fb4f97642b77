//! Per-image differentiable clustering steered by sampled pseudo-labels.
//!
//! A freshly initialized labeling network is optimized on a single image
//! with a self-distillation term, a spatial continuity term and a scribble
//! term whose pixels are re-drawn from the relevance maps every iteration.
//! Optimization stops at the iteration budget or once the number of
//! distinct argmax labels drops to `min_labels`.

pub mod loss;
pub mod net;

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, MultiClassRelevance, Pixel};
use crate::mask::SegmentationMask;
use crate::raster::RgbImage;
use crate::seed;

pub use loss::{continuity_loss, cross_entropy, hard_labels, scribble_loss, self_distill_loss, Loss};
pub use net::LabelNet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub feature_similarity: f64,
    pub continuity: f64,
    pub scribble: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            feature_similarity: 1.0,
            continuity: 5.0,
            scribble: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Output channel count `q`.
    pub max_labels: usize,
    pub hidden_channels: usize,
    pub max_iters: usize,
    /// Stop target; `None` means number of categories + 1.
    pub min_labels: Option<usize>,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Pseudo-labels drawn per category (and for background) each iteration.
    pub samples_per_iter: usize,
    pub tau: f64,
    pub seed: u64,
    /// Soft wall-clock limit in seconds.
    pub max_seconds: Option<f64>,
    /// Threshold of the binarized fallback used when `max_iters` is 0.
    pub fallback_threshold: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            max_labels: 16,
            hidden_channels: 32,
            max_iters: 200,
            min_labels: None,
            weights: LossWeights::default(),
            learning_rate: 0.1,
            momentum: 0.9,
            samples_per_iter: 64,
            tau: 0.1,
            seed: 0,
            max_seconds: None,
            fallback_threshold: 0.5,
        }
    }
}

impl ClusterConfig {
    pub fn min_labels_for(&self, categories: usize) -> usize {
        self.min_labels.unwrap_or(categories + 1)
    }

    pub fn validate(&self, categories: usize) -> Result<()> {
        let min = self.min_labels_for(categories);
        let w = &self.weights;
        let problem = if min < 1 || self.max_labels < min {
            Some(format!("need max_labels {} >= min_labels {min} >= 1", self.max_labels))
        } else if [w.feature_similarity, w.continuity, w.scribble].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            Some("loss weights must be finite and non-negative".into())
        } else if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            Some("learning rate must be positive and momentum in [0, 1)".into())
        } else if self.hidden_channels == 0 || self.samples_per_iter == 0 {
            Some("hidden_channels and samples_per_iter must be positive".into())
        } else if !(self.tau > 0.0) {
            Some(format!("tau must be positive, got {}", self.tau))
        } else if w.scribble > 0.0 && self.max_labels < categories + 1 {
            Some(format!("max_labels {} cannot reserve {} category clusters", self.max_labels, categories + 1))
        } else {
            None
        };
        problem.map_or(Ok(()), |p| Err(Error::InvalidArgument(p)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    /// Per-channel standardized RGB.
    Rgb,
    /// `(channels, height, width)` features, e.g. from a frozen image tower.
    Precomputed(Array3<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub self_distill: f64,
    pub continuity: f64,
    pub scribble: f64,
    pub distinct_labels: usize,
    pub sample_seed: Option<u64>,
    pub stopped: bool,
}

#[derive(Clone, Debug)]
pub struct ClusterOutcome {
    pub mask: SegmentationMask,
    /// Raw cluster index per pixel at the final iteration.
    pub clusters: Array2<usize>,
    pub log: Vec<IterationRecord>,
    /// All pixels ended up in a single cluster.
    pub degenerate: bool,
    /// The iteration budget was zero, so the binarized relevance was returned.
    pub fallback: bool,
}

impl ClusterOutcome {
    pub fn write_log<W: Write>(&self, mut sink: W) -> Result<()> {
        for record in &self.log {
            serde_json::to_writer(&mut sink, record)?;
            sink.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn features_matrix(image: &RgbImage, source: &FeatureSource) -> Result<Array2<f64>> {
    let (h, w) = image.shape();
    match source {
        FeatureSource::Rgb => {
            let px = image.pixels();
            let mut m = Array2::zeros((3, h * w));
            for ch in 0..3 {
                let view = px.index_axis(Axis(2), ch);
                let mean = view.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
                let var = view.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (h * w) as f64;
                let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
                for (i, &v) in view.iter().enumerate() {
                    m[[ch, i]] = (v as f64 - mean) * scale;
                }
            }
            Ok(m)
        }
        FeatureSource::Precomputed(f) => {
            let (c, fh, fw) = f.dim();
            if (fh, fw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: (h, w),
                    actual: (fh, fw),
                });
            }
            if c == 0 || f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("features must be non-empty and finite".into()));
            }
            Ok(f.to_shape((c, h * w))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?
                .mapv(f64::from))
        }
    }
}

fn distinct(labels: &Array2<usize>) -> usize {
    labels.iter().collect::<BTreeSet<_>>().len()
}

/// Segments `image` into the categories of `relevance` (label `i` is the
/// `i`-th category, `0` background). With a zero scribble weight the
/// relevance is ignored and the raw clusters are returned as segments
/// `1..=n` in raster order of first appearance.
pub fn segment(
    image: &RgbImage,
    relevance: &MultiClassRelevance,
    cfg: &ClusterConfig,
    features: &FeatureSource,
) -> Result<ClusterOutcome> {
    let (h, w) = image.shape();
    if relevance.shape() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: (h, w),
            actual: relevance.shape(),
        });
    }
    let k = relevance.num_categories();
    cfg.validate(k)?;
    if cfg.max_iters == 0 {
        let mask = fusion::binarize(relevance, cfg.fallback_threshold)?;
        let clusters = mask.labels().mapv(usize::from);
        return Ok(ClusterOutcome {
            degenerate: distinct(&clusters) == 1,
            mask,
            clusters,
            log: Vec::new(),
            fallback: true,
        });
    }
    let guided = cfg.weights.scribble > 0.0;
    let input = features_matrix(image, features)?.mapv(|v| v as f32);
    let mut rng = seed::rng(seed::derive(cfg.seed, &[&"init"]));
    let mut net = LabelNet::<f32>::new(h, w, input.nrows(), cfg.hidden_channels, cfg.max_labels, &mut rng);
    let min_labels = cfg.min_labels_for(k);
    let budget = cfg.max_seconds.map(Duration::from_secs_f64);
    let started = Instant::now();
    let mut log = Vec::new();
    let mut votes: Vec<(Pixel, u8)> = Vec::new();
    let mut iteration = 0;
    let clusters = loop {
        let out = net.forward(&input);
        let logits = out
            .mapv(f64::from)
            .t()
            .to_shape((h, w, cfg.max_labels))
            .map(|v| v.to_owned())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let labels = hard_labels(logits.view());
        let n_labels = distinct(&labels);
        let out_of_time = budget.is_some_and(|b| started.elapsed() >= b);
        let stop = n_labels <= min_labels || iteration >= cfg.max_iters || out_of_time;

        let (samples, sample_seed) = if guided && !stop {
            let s = seed::derive(cfg.seed, &[&"scribble", &iteration]);
            (draw_scribbles(relevance, cfg, s)?, Some(s))
        } else {
            (Vec::new(), None)
        };
        let sd = self_distill_loss(logits.view());
        let ct = continuity_loss(logits.view());
        let targets: Vec<(Pixel, usize)> = samples.iter().map(|&(p, l)| (p, l as usize)).collect();
        let sc = if guided && !stop {
            scribble_loss(logits.view(), &targets)
        } else {
            Loss {
                value: 0.0,
                grad: Array3::zeros((h, w, cfg.max_labels)),
            }
        };
        let wts = &cfg.weights;
        // the continuity weight applies per response channel
        let w_ct = wts.continuity / cfg.max_labels as f64;
        let total = wts.feature_similarity * sd.value + w_ct * ct.value + wts.scribble * sc.value;
        log.push(IterationRecord {
            iteration,
            total,
            self_distill: sd.value,
            continuity: ct.value,
            scribble: sc.value,
            distinct_labels: n_labels,
            sample_seed,
            stopped: stop,
        });
        if !total.is_finite() {
            return Err(Error::Divergence {
                iteration,
                detail: format!("total loss {total}"),
            });
        }
        if stop {
            break labels;
        }
        votes.extend(samples);
        let grad = sd.grad * wts.feature_similarity + ct.grad * w_ct + sc.grad * wts.scribble;
        let grad_out = grad
            .to_shape((h * w, cfg.max_labels))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .t()
            .mapv(|v| v as f32);
        net.backward_step(&grad_out, cfg.learning_rate as f32, cfg.momentum as f32);
        iteration += 1;
    };
    let degenerate = distinct(&clusters) == 1;
    if degenerate {
        log::warn!("clustering collapsed to a single label");
    }
    let mask = if guided {
        let weights = vote_weights(relevance, cfg.tau)?;
        let mapping = vote_mapping(&clusters, &votes, &weights, cfg.max_labels);
        SegmentationMask::new(clusters.mapv(|c| mapping[c]), relevance.categories().to_vec())?
    } else {
        compact(&clusters)?
    };
    Ok(ClusterOutcome {
        mask,
        clusters,
        log,
        degenerate,
        fallback: false,
    })
}

/// Pseudo-labels for every confident category plus background, with
/// category `c` targeting cluster `c` and background cluster `0`.
fn draw_scribbles(relevance: &MultiClassRelevance, cfg: &ClusterConfig, seed: u64) -> Result<Vec<(Pixel, u8)>> {
    let mut out = Vec::new();
    for c in 0..=relevance.num_categories() {
        let empty = relevance.channel(c).is_none_or(|m| m.iter().all(|&v| v == 0.0));
        if relevance.is_low_confidence(c) || empty {
            continue;
        }
        let batch = fusion::sample(relevance, c, cfg.samples_per_iter, cfg.tau, seed::derive(seed, &[&c]))?;
        out.extend(batch.samples.iter().map(|s| (s.pixel, s.label)));
    }
    Ok(out)
}

/// Per-label vote weight: the effective support size (inverse Simpson
/// index) of the label's sampling distribution. Every channel draws the same
/// number of samples, so a weighted tally estimates how many pixels of each
/// label a cluster covers instead of favoring small regions.
pub fn vote_weights(relevance: &MultiClassRelevance, tau: f64) -> Result<Vec<f64>> {
    (0..=relevance.num_categories())
        .map(|c| {
            let map = relevance
                .channel(c)
                .ok_or_else(|| Error::InvalidArgument(format!("no channel {c}")))?;
            let probs = fusion::sampling_distribution(map, tau);
            Ok(1.0 / probs.iter().map(|p| p * p).sum::<f64>())
        })
        .collect()
}

/// Weighted majority vote of sampled labels per cluster (`weights[label]`
/// per sample), ties to the lower label; clusters that received no samples
/// become background.
pub fn vote_mapping(clusters: &Array2<usize>, votes: &[(Pixel, u8)], weights: &[f64], num_clusters: usize) -> Vec<u8> {
    let mut tally = vec![vec![0.0f64; weights.len()]; num_clusters];
    let mut seen = vec![false; num_clusters];
    for &(p, label) in votes {
        let k = clusters[[p.y, p.x]];
        tally[k][label as usize] += weights[label as usize];
        seen[k] = true;
    }
    tally
        .iter()
        .zip(&seen)
        .map(|(t, &any)| {
            if !any {
                return 0;
            }
            let mut best = 0;
            for (l, &v) in t.iter().enumerate() {
                if v > t[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect()
}

fn compact(clusters: &Array2<usize>) -> Result<SegmentationMask> {
    let mut ids = std::collections::HashMap::new();
    let mut labels = Array2::zeros(clusters.dim());
    for (dst, &c) in labels.iter_mut().zip(clusters.iter()) {
        let next = ids.len() + 1;
        let id = *ids.entry(c).or_insert(next);
        *dst = u8::try_from(id).map_err(|_| Error::InvalidArgument("more than 255 clusters".into()))?;
    }
    let names = (1..=ids.len()).map(|i| format!("segment_{i}")).collect();
    SegmentationMask::new(labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_region_image(h: usize, w: usize) -> RgbImage {
        RgbImage::from_fn(h, w, |_, c| if c < w / 2 { [0.9, 0.1, 0.1] } else { [0.1, 0.2, 0.9] }).unwrap()
    }

    fn two_region_relevance(h: usize, w: usize) -> MultiClassRelevance {
        let left = Array2::from_shape_fn((h, w), |(_, c)| if c < w / 2 { 1.0 } else { 0.0 });
        let right = left.mapv(|v| 1.0 - v);
        MultiClassRelevance::from_channels(vec!["left".into(), "right".into()], vec![left, right]).unwrap()
    }

    #[test]
    fn votes_break_ties_low() {
        let clusters = array![[0usize, 1], [1, 2]];
        let votes = vec![
            (Pixel::new(1, 0), 2),
            (Pixel::new(0, 1), 1),
            (Pixel::new(0, 0), 0),
            (Pixel::new(0, 0), 1),
            (Pixel::new(0, 0), 1),
        ];
        assert_eq!(vote_mapping(&clusters, &votes, &[1.0; 3], 4), vec![1, 1, 0, 0]);
    }

    #[test]
    fn zero_budget_returns_binarized_relevance() {
        let rel = two_region_relevance(6, 6);
        let cfg = ClusterConfig {
            max_iters: 0,
            ..Default::default()
        };
        let out = segment(&two_region_image(6, 6), &rel, &cfg, &FeatureSource::Rgb).unwrap();
        assert!(out.fallback);
        assert_eq!(out.mask, fusion::binarize(&rel, 0.5).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let rel = two_region_relevance(4, 4);
        let img = two_region_image(4, 4);
        for cfg in [
            ClusterConfig {
                max_labels: 2,
                ..Default::default()
            },
            ClusterConfig {
                weights: LossWeights {
                    continuity: -1.0,
                    ..Default::default()
                },
                ..Default::default()
            },
            ClusterConfig {
                min_labels: Some(0),
                ..Default::default()
            },
        ] {
            assert!(matches!(segment(&img, &rel, &cfg, &FeatureSource::Rgb), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn guided_run_separates_two_regions() {
        let (h, w) = (16, 16);
        let rel = two_region_relevance(h, w);
        let cfg = ClusterConfig {
            max_iters: 60,
            seed: 3,
            ..Default::default()
        };
        let out = segment(&two_region_image(h, w), &rel, &cfg, &FeatureSource::Rgb).unwrap();
        let correct = out
            .mask
            .labels()
            .indexed_iter()
            .filter(|&((_, c), &l)| l == if c < w / 2 { 1 } else { 2 })
            .count();
        assert!(correct as f64 / (h * w) as f64 >= 0.9, "{correct}");
        // one cluster may straddle the color edge; away from it labels are exact
        let labels = out.mask.labels();
        assert!(labels.indexed_iter().filter(|&((_, c), _)| c < w / 2 - 1 || c > w / 2).all(|((_, c), &l)| l == if c < w / 2 { 1 } else { 2 }));
        let mut buf = Vec::new();
        out.write_log(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), out.log.len());
    }
}
