//! Datasets, the best-match mean-IoU metric and benchmark orchestration.

pub mod datasets;
pub mod metric;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{class_probabilities, MockScene, SceneContext};
use crate::error::{Error, Result};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::seed;

pub use datasets::{load_imagenet_seg, load_voc, DatasetId, DatasetRecord, GroundTruth, RecordSource};
pub use metric::{best_match_labels, best_match_miou, IGNORE};

/// How the prompt list of an image is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PromptMode {
    /// The ground-truth categories of the image.
    GroundTruth,
    /// The single most probable vocabulary category; only ground-truth
    /// segments of that category are scored.
    Single,
    /// Every vocabulary category whose image-level probability reaches
    /// `cutoff`, or the most probable one if none does.
    Unknown { cutoff: f64 },
}

impl Default for PromptMode {
    fn default() -> Self {
        Self::GroundTruth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub name: String,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub prompt_mode: PromptMode,
}

impl BenchmarkConfig {
    pub fn new(name: impl Into<String>, pipeline: PipelineConfig, prompt_mode: PromptMode) -> Self {
        Self {
            name: name.into(),
            pipeline,
            prompt_mode,
        }
    }

    /// SHA-256 of the canonical JSON form together with the master seed.
    pub fn hash(&self, master_seed: u64) -> Result<String> {
        let mut text = serde_json::to_string(self)?;
        write!(text, "|{master_seed}").expect("writing to a string");
        Ok(seed::digest_hex(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    /// `None` when the image had no scorable segment or failed.
    pub iou: Option<f64>,
    pub prompts: Vec<String>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: BenchmarkConfig,
    pub config_hash: String,
    pub master_seed: u64,
    pub images: Vec<ImageResult>,
    pub mean_iou: f64,
    pub scored: usize,
    pub failed: usize,
    /// Scored fraction of the requested images.
    pub coverage: f64,
    /// Sum of per-image runtimes.
    pub total_seconds: f64,
    pub mean_seconds: f64,
}

impl EvalReport {
    fn summarize(config: BenchmarkConfig, config_hash: String, master_seed: u64, images: Vec<ImageResult>) -> Self {
        let values: Vec<f64> = images.iter().filter_map(|r| r.iou).collect();
        let scored = values.len();
        let failed = images.iter().filter(|r| r.error.is_some()).count();
        let mean_iou = if scored == 0 { 0.0 } else { values.iter().sum::<f64>() / scored as f64 };
        let total_seconds: f64 = images.iter().map(|r| r.seconds).sum();
        let n = images.len().max(1) as f64;
        Self {
            config,
            config_hash,
            master_seed,
            coverage: scored as f64 / n,
            mean_seconds: total_seconds / n,
            images,
            mean_iou,
            scored,
            failed,
            total_seconds,
        }
    }
}

/// Plain-text table of report summaries.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.config.name.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>8}  {:>7}  {:>6}  {:>9}\n", "config", "mean IoU", "scored", "failed", "s/image");
    for r in reports {
        writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>7}  {:>6}  {:>9.2}",
            r.config.name, r.mean_iou, r.scored, r.failed, r.mean_seconds
        )
        .expect("writing to a string");
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkOptions {
    /// Worker threads; 0 uses rayon's default.
    pub workers: usize,
    /// JSON-lines result cache.
    pub cache: Option<PathBuf>,
    pub master_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    result: ImageResult,
}

struct Cache {
    entries: HashMap<String, ImageResult>,
    sink: Option<Mutex<std::fs::File>>,
}

impl Cache {
    fn open(path: Option<&Path>) -> Result<Self> {
        let mut entries = HashMap::new();
        let Some(path) = path else {
            return Ok(Self { entries, sink: None });
        };
        if path.exists() {
            let file = std::io::BufReader::new(std::fs::File::open(path)?);
            for line in file.lines() {
                let line = line?;
                // a torn trailing line from an interrupted run is skipped
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.result);
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries,
            sink: Some(Mutex::new(file)),
        })
    }

    fn store(&self, key: String, result: &ImageResult) -> Result<()> {
        if let Some(sink) = &self.sink {
            let mut line = serde_json::to_string(&CacheLine {
                key,
                result: result.clone(),
            })?;
            line.push('\n');
            let mut file = sink.lock().unwrap_or_else(|e| e.into_inner());
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        Ok(())
    }
}

/// Seed of one image under a master seed.
pub fn image_seed(master_seed: u64, image_id: &str) -> u64 {
    seed::derive(master_seed, &[&"image", &image_id])
}

/// Evaluates every configuration on every record. Per-image failures are
/// recorded in the report; completed images are read back from the cache.
pub fn run_benchmark(
    pipeline: &Pipeline,
    records: &[DatasetRecord],
    configs: &[BenchmarkConfig],
    options: &BenchmarkOptions,
) -> Result<Vec<EvalReport>> {
    for cfg in configs {
        cfg.pipeline.validate(&pipeline.backends, &pipeline.segmenters)?;
    }
    let cache = Cache::open(options.cache.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    configs
        .iter()
        .map(|cfg| {
            let hash = cfg.hash(options.master_seed)?;
            let images = pool.install(|| {
                records
                    .par_iter()
                    .map(|record| {
                        let key = format!("{}|{hash}", record.id);
                        if let Some(hit) = cache.entries.get(&key) {
                            return Ok(hit.clone());
                        }
                        let result = evaluate_image(pipeline, record, cfg, options.master_seed);
                        cache.store(key, &result)?;
                        Ok(result)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            Ok(EvalReport::summarize(cfg.clone(), hash, options.master_seed, images))
        })
        .collect()
}

/// Runs one configuration on one record; never fails, errors are recorded.
pub fn evaluate_image(pipeline: &Pipeline, record: &DatasetRecord, cfg: &BenchmarkConfig, master_seed: u64) -> ImageResult {
    let started = std::time::Instant::now();
    let mut prompts = Vec::new();
    let outcome = score_image(pipeline, record, cfg, master_seed, &mut prompts);
    let seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok(iou) => {
            if iou.is_none() {
                log::warn!("{}: no foreground segment to score", record.id);
            }
            ImageResult {
                id: record.id.clone(),
                iou,
                prompts,
                error: None,
                seconds,
            }
        }
        Err(e) => {
            log::warn!("{}: {e}", record.id);
            ImageResult {
                id: record.id.clone(),
                iou: None,
                prompts,
                error: Some(e.to_string()),
                seconds,
            }
        }
    }
}

fn score_image(
    pipeline: &Pipeline,
    record: &DatasetRecord,
    cfg: &BenchmarkConfig,
    master_seed: u64,
    prompts: &mut Vec<String>,
) -> Result<Option<f64>> {
    let (image, gt) = record.load()?;
    let present = gt.present();
    if present.is_empty() {
        return Ok(None);
    }
    let context = SceneContext {
        scene: Some(MockScene::from_labels(&gt.scene_labels(), &gt.label_names)),
    };
    let mut pcfg = cfg.pipeline.clone();
    pcfg.seed = seed::derive(image_seed(master_seed, &record.id), &[&pcfg.seed]);

    let (queries, scored): (Vec<String>, Option<Vec<u8>>) = match cfg.prompt_mode {
        PromptMode::GroundTruth => (present.iter().filter_map(|&l| gt.name(l)).map(String::from).collect(), None),
        PromptMode::Single | PromptMode::Unknown { .. } => {
            let backend = pipeline.backend(&pcfg, &context)?;
            let vocab = pcfg.prompts(&record.vocabulary)?;
            let probs = class_probabilities(backend.as_ref(), &image, &vocab)?;
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let chosen: Vec<usize> = match cfg.prompt_mode {
                PromptMode::Unknown { cutoff } => {
                    let above: Vec<usize> = order.iter().copied().filter(|&i| probs[i] >= cutoff).collect();
                    if above.is_empty() {
                        order[..1].to_vec()
                    } else {
                        above
                    }
                }
                _ => order[..1].to_vec(),
            };
            let names: Vec<String> = chosen.iter().map(|&i| record.vocabulary[i].clone()).collect();
            let scored = matches!(cfg.prompt_mode, PromptMode::Single).then(|| {
                present
                    .iter()
                    .copied()
                    .filter(|&l| gt.name(l).is_some_and(|n| names.contains(&n.to_string())))
                    .collect()
            });
            (names, scored)
        }
    };
    *prompts = queries.clone();
    if scored.as_ref().is_some_and(|s: &Vec<u8>| s.is_empty()) {
        // the single prompt names no ground-truth category
        return Ok(Some(0.0));
    }
    let predicted = match pipeline.run(&pcfg, &image, &queries, &context) {
        Ok(out) => out.mask.labels().clone(),
        Err(Error::NoSignal) => ndarray::Array2::zeros(image.shape()),
        Err(e) => return Err(e),
    };
    best_match_labels(&gt.labels, &predicted, scored.as_deref())
}

/// Deterministic subset of `n` records chosen by `seed`, in dataset order.
pub fn subset(records: &[DatasetRecord], n: usize, seed: u64) -> Vec<DatasetRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let mut rng = seed::rng(seed::derive(seed, &[&"subset"]));
    let (chosen, _) = rand::seq::SliceRandom::partial_shuffle(idx.as_mut_slice(), &mut rng, n);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| records[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Method;
    use crate::tta::ViewKind;

    fn quick(method: Method) -> PipelineConfig {
        PipelineConfig {
            method,
            views: vec![ViewKind::Identity],
            ..Default::default()
        }
    }

    #[test]
    fn subset_is_seeded() {
        let records = synthetic::bundled();
        let a: Vec<String> = subset(&records, 4, 7).into_iter().map(|r| r.id).collect();
        let b: Vec<String> = subset(&records, 4, 7).into_iter().map(|r| r.id).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(subset(&records, 40, 7).len(), records.len());
    }

    #[test]
    fn cached_rerun_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let records = &synthetic::bundled()[..3];
        let configs = vec![BenchmarkConfig::new("thr", quick(Method::Threshold), PromptMode::GroundTruth)];
        let options = BenchmarkOptions {
            workers: 2,
            cache: Some(dir.path().join("cache.jsonl")),
            master_seed: 5,
        };
        let pipeline = Pipeline::default();
        let first = run_benchmark(&pipeline, records, &configs, &options).unwrap();
        let second = run_benchmark(&pipeline, records, &configs, &options).unwrap();
        assert_eq!(first, second);
        assert_eq!(first[0].scored, 3);
        let lines = std::fs::read_to_string(dir.path().join("cache.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
    }

    #[test]
    fn single_prompt_mode_scores_a_present_category() {
        let records = &synthetic::bundled()[..2];
        let cfg = BenchmarkConfig::new("k1", quick(Method::Interactive), PromptMode::Single);
        for r in records {
            let result = evaluate_image(&Pipeline::default(), r, &cfg, 0);
            assert_eq!(result.prompts.len(), 1);
            assert!(r.label_names.contains(&result.prompts[0]));
            assert!(result.iou.unwrap() > 0.5);
        }
    }

    #[test]
    fn table_lists_configs() {
        let report = EvalReport::summarize(
            BenchmarkConfig::new("demo", PipelineConfig::default(), PromptMode::GroundTruth),
            "h".into(),
            0,
            vec![ImageResult {
                id: "a".into(),
                iou: Some(0.5),
                prompts: vec![],
                error: None,
                seconds: 1.0,
            }],
        );
        assert_eq!(report.mean_iou, 0.5);
        assert!(render_table(&[report]).contains("demo"));
    }
}
