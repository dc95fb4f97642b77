//! End-to-end configuration and execution: relevance refinement, fusion and
//! one of the three segmentation methods.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, BackendRegistry, PromptSet, SceneContext, VisionLanguageBackend, DEFAULT_DISTRACTORS, DEFAULT_TEMPLATE};
use crate::cluster::{self, ClusterConfig, ClusterOutcome, FeatureSource};
use crate::error::{Error, Result};
use crate::fusion::{self, MultiClassRelevance};
use crate::interactive::{self, ClickConfig, ClickTranscript, SegmenterRegistry};
use crate::mask::SegmentationMask;
use crate::raster::{resize_bilinear, RgbImage};
use crate::seed;
use crate::tta::{self, CropGridSpec, RefineOptions, RefinedRelevance, ViewKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Threshold,
    Cluster,
    Interactive,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Self::Threshold),
            "cluster" => Ok(Self::Cluster),
            "interactive" => Ok(Self::Interactive),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?} (expected threshold, cluster or interactive)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Rgb,
    /// Dense features from the vision backend, falling back to RGB when the
    /// backend has none.
    Deep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub views: Vec<ViewKind>,
    pub grid: CropGridSpec,
    pub distractors: Vec<String>,
    pub template: String,
    pub calibrate: bool,
    /// Overrides the sampling temperature of both methods when set.
    pub tau: Option<f64>,
    pub method: Method,
    pub threshold: f64,
    pub cluster: ClusterConfig,
    pub features: FeatureKind,
    pub clicks: ClickConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            views: ViewKind::ALL.to_vec(),
            grid: CropGridSpec::default(),
            distractors: DEFAULT_DISTRACTORS.iter().map(|s| s.to_string()).collect(),
            template: DEFAULT_TEMPLATE.into(),
            calibrate: true,
            tau: None,
            method: Method::Cluster,
            threshold: 0.5,
            cluster: ClusterConfig::default(),
            features: FeatureKind::Rgb,
            clicks: ClickConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFiles(vec![path.to_path_buf()]))?;
        Self::from_json(&text)
    }

    /// Checks ranges and that the referenced implementations are registered.
    pub fn validate(&self, backends: &BackendRegistry, segmenters: &SegmenterRegistry) -> Result<()> {
        if !backends.contains(&self.backend.name) {
            let known: Vec<&str> = backends.names().collect();
            return Err(Error::BackendUnavailable(format!(
                "unknown backend {:?} (known: {})",
                self.backend.name,
                known.join(", ")
            )));
        }
        if self.method == Method::Interactive && !segmenters.contains(&self.clicks.model) {
            return Err(Error::ModelUnavailable(format!("unknown interactive model {:?}", self.clicks.model)));
        }
        if self.views.is_empty() {
            return Err(Error::EmptyViewSet);
        }
        self.grid.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("tau must be positive, got {t}")));
            }
        }
        if !(self.clicks.tau > 0.0) || self.clicks.positives == 0 {
            return Err(Error::InvalidArgument("clicks need a positive tau and at least one positive".into()));
        }
        if !self.template.contains("{label}") {
            return Err(Error::InvalidPrompts("template must contain {label}".into()));
        }
        self.cluster.validate(0)
    }

    /// Prompt set for `queries`, dropping configured distractors that are
    /// also queried.
    pub fn prompts(&self, queries: &[String]) -> Result<PromptSet> {
        let distractors = self.distractors.iter().filter(|d| !queries.contains(d)).cloned().collect();
        PromptSet::new(queries.to_vec(), distractors, self.template.clone())
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            views: self.views.clone(),
            grid: self.grid,
            seed: seed::derive(self.seed, &[&"views"]),
            calibrate: self.calibrate,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub refined: RefinedRelevance,
    pub relevance: MultiClassRelevance,
    pub mask: SegmentationMask,
    pub cluster: Option<ClusterOutcome>,
    pub transcripts: Vec<ClickTranscript>,
    pub seconds: f64,
}

/// Registries the pipeline resolves names against.
pub struct Pipeline {
    pub backends: BackendRegistry,
    pub segmenters: SegmenterRegistry,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            backends: BackendRegistry::standard(),
            segmenters: SegmenterRegistry::standard(),
        }
    }
}

impl Pipeline {
    pub fn backend(&self, cfg: &PipelineConfig, context: &SceneContext) -> Result<Box<dyn VisionLanguageBackend>> {
        self.backends.create(&cfg.backend, context)
    }

    pub fn relevance(
        &self,
        cfg: &PipelineConfig,
        image: &RgbImage,
        queries: &[String],
        context: &SceneContext,
    ) -> Result<RefinedRelevance> {
        cfg.validate(&self.backends, &self.segmenters)?;
        let backend = self.backend(cfg, context)?;
        tta::refine(backend.as_ref(), image, &cfg.prompts(queries)?, &cfg.refine_options())
    }

    pub fn run(
        &self,
        cfg: &PipelineConfig,
        image: &RgbImage,
        queries: &[String],
        context: &SceneContext,
    ) -> Result<PipelineOutput> {
        let started = Instant::now();
        cfg.validate(&self.backends, &self.segmenters)?;
        let backend = self.backend(cfg, context)?;
        let refined = tta::refine(backend.as_ref(), image, &cfg.prompts(queries)?, &cfg.refine_options())?;
        let relevance = fusion::fuse(&refined)?;
        let mut cluster_outcome = None;
        let mut transcripts = Vec::new();
        let mask = match cfg.method {
            Method::Threshold => fusion::binarize(&relevance, cfg.threshold)?,
            Method::Cluster => {
                let mut ccfg = cfg.cluster.clone();
                ccfg.seed = seed::derive(cfg.seed, &[&"cluster", &ccfg.seed]);
                if let Some(t) = cfg.tau {
                    ccfg.tau = t;
                }
                let features = match cfg.features {
                    FeatureKind::Rgb => FeatureSource::Rgb,
                    FeatureKind::Deep => deep_features(backend.as_ref(), image)?,
                };
                let out = cluster::segment(image, &relevance, &ccfg, &features)?;
                let mask = out.mask.clone();
                cluster_outcome = Some(out);
                mask
            }
            Method::Interactive => {
                let mut clicks = cfg.clicks.clone();
                if let Some(t) = cfg.tau {
                    clicks.tau = t;
                }
                let mut model = self.segmenters.create(&clicks, context)?;
                let out = interactive::segment_image(
                    model.as_mut(),
                    image,
                    &relevance,
                    &clicks,
                    seed::derive(cfg.seed, &[&"clicks"]),
                )?;
                transcripts = out.transcripts;
                out.mask
            }
        };
        Ok(PipelineOutput {
            refined,
            relevance,
            mask,
            cluster: cluster_outcome,
            transcripts,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

fn deep_features(backend: &dyn VisionLanguageBackend, image: &RgbImage) -> Result<FeatureSource> {
    let Some(features) = backend.dense_features(image)? else {
        log::warn!("backend {} has no dense features; clustering on RGB", backend.descriptor().name);
        return Ok(FeatureSource::Rgb);
    };
    let (h, w) = image.shape();
    let channels = features.dim().0;
    let mut out = Array3::zeros((channels, h, w));
    for (c, plane) in features.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), c).assign(&resize_bilinear(&plane.to_owned(), h, w));
    }
    Ok(FeatureSource::Precomputed(out))
}
