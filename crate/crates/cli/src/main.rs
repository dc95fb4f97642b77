use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg::archive::save_rmz;
use promptseg::backend::{MockScene, SceneContext};
use promptseg::eval::{self, synthetic, BenchmarkConfig, BenchmarkOptions, DatasetId, PromptMode};
use promptseg::mask::{heatmap, read_gray8, SegmentationMask};
use promptseg::pipeline::{Method, Pipeline, PipelineConfig};
use promptseg::raster::RgbImage;
use promptseg::tta::ViewKind;
use promptseg::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_NO_SIGNAL: u8 = 4;
const EXIT_DATASET: u8 = 5;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Prompted zero-shot segmentation from relevance maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image into the prompted categories.
    Segment(SegmentArgs),
    /// Compute refined relevance maps only and store them as `.rmz`.
    Relevance(RelevanceArgs),
    /// Run a benchmark over a dataset.
    Evaluate(EvaluateArgs),
    /// Write the synthetic dataset to disk.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct Shared {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    /// Comma separated views: identity, hflip, contrast, crop.
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    image: PathBuf,
    /// Comma separated category names. Defaults to the scene's categories.
    #[arg(long)]
    prompts: Option<String>,
    /// Ground-truth label PNG (with name sidecar) for the mock backend.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Sampling temperature for scribbles and clicks.
    #[arg(long)]
    tau: Option<f64>,
    /// Positive clicks per category (interactive method).
    #[arg(long)]
    clicks: Option<usize>,
    /// Soft time limit in seconds for the cluster method.
    #[arg(long)]
    budget: Option<f64>,
    /// Also write per-category heatmaps.
    #[arg(long)]
    render: bool,
}

#[derive(Args)]
struct RelevanceArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    render: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptArg {
    Gt,
    Single,
    Unknown,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    shared: Shared,
    /// voc, imagenet-seg or synthetic.
    #[arg(long)]
    dataset: String,
    /// Dataset root; falls back to PROMPTSEG_VOC_ROOT / PROMPTSEG_IMAGENETSEG_ROOT.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    /// Evaluate a seeded random subset of this many images.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_enum, default_value = "gt")]
    prompt_mode: PromptArg,
    /// Probability cutoff of the `unknown` prompt mode.
    #[arg(long, default_value_t = 0.3)]
    cutoff: f64,
    /// Result cache; defaults to `cache.jsonl` in the output directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args)]
struct SynthArgs {
    dir: PathBuf,
    #[arg(long, default_value_t = synthetic::BUNDLED_SEED)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BackendUnavailable(_)
            | Error::ModelUnavailable(_)
            | Error::NonFiniteRelevance { .. }
            | Error::Divergence { .. } => EXIT_BACKEND,
            Error::NoSignal => EXIT_NO_SIGNAL,
            Error::InvalidArgument(_)
            | Error::InvalidImage(_)
            | Error::InvalidPrompts(_)
            | Error::ShapeMismatch { .. }
            | Error::EmptyViewSet
            | Error::InvalidGrid(_)
            | Error::EmptyChannel(_)
            | Error::MissingFiles(_)
            | Error::Json(_)
            | Error::Image(_)
            | Error::PngDecode(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Segment(args) => segment(args),
        Command::Relevance(args) => relevance(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Synth(args) => synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn base_config(shared: &Shared, fallback: impl FnOnce() -> PipelineConfig) -> CliResult<PipelineConfig> {
    let mut cfg = match &shared.config {
        Some(path) => PipelineConfig::load(path)?,
        None => fallback(),
    };
    if let Some(b) = &shared.backend {
        cfg.backend.name = b.clone();
    }
    if let Some(v) = &shared.views {
        cfg.views = ViewKind::parse_list(v)?;
    }
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    if let Some(out) = &shared.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &PipelineConfig) -> CliResult<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("promptseg-out"));
    std::fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

struct Loaded {
    image: RgbImage,
    queries: Vec<String>,
    context: SceneContext,
    stem: String,
}

fn load_inputs(inputs: &Inputs) -> CliResult<Loaded> {
    if !inputs.image.is_file() {
        return Err(usage(format!("image not found: {}", inputs.image.display())));
    }
    let image = RgbImage::open(&inputs.image)?;
    let scene = match &inputs.scene {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("scene not found: {}", path.display())));
            }
            let labels = read_gray8(path)?;
            let names = if SegmentationMask::sidecar_path(path).is_file() {
                SegmentationMask::load(path)?.categories().to_vec()
            } else {
                let max = labels.iter().copied().filter(|&l| l != eval::IGNORE).max().unwrap_or(0);
                (1..=max).map(|l| format!("class_{l}")).collect()
            };
            if labels.dim() != image.shape() {
                return Err(Error::ShapeMismatch {
                    expected: image.shape(),
                    actual: labels.dim(),
                }
                .into());
            }
            let labels = labels.mapv(|l| if l == eval::IGNORE { 0 } else { l });
            Some(MockScene::from_labels(&labels, &names))
        }
        None => None,
    };
    let queries: Vec<String> = match (&inputs.prompts, &scene) {
        (Some(p), _) => p.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
        (None, Some(s)) => s.categories().map(String::from).collect(),
        (None, None) => Vec::new(),
    };
    if queries.is_empty() {
        return Err(usage("no prompts given (use --prompts or --scene)"));
    }
    let stem = inputs
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    Ok(Loaded {
        image,
        queries,
        context: SceneContext { scene },
        stem,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let file = File::create(path).map_err(Error::from)?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(Error::from)?;
    Ok(())
}

fn render_heatmaps(dir: &Path, stem: &str, refined: &promptseg::tta::RefinedRelevance) -> CliResult<()> {
    for map in &refined.maps {
        let name: String = map
            .category()
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        heatmap(map.scores())?.save(&dir.join(format!("{stem}_{name}.png")))?;
    }
    Ok(())
}

fn segment(args: SegmentArgs) -> CliResult<()> {
    let mut cfg = base_config(&args.shared, PipelineConfig::default)?;
    if let Some(m) = &args.method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    if let Some(t) = args.tau {
        cfg.tau = Some(t);
    }
    if let Some(n) = args.clicks {
        cfg.clicks.positives = n;
    }
    if let Some(b) = args.budget {
        if !(b > 0.0) {
            return Err(usage(format!("budget must be positive, got {b}")));
        }
        cfg.cluster.max_seconds = Some(b);
    }
    let input = load_inputs(&args.inputs)?;
    let pipeline = Pipeline::default();
    let out = pipeline.run(&cfg, &input.image, &input.queries, &input.context)?;
    let dir = output_dir(&cfg)?;
    let stem = &input.stem;

    out.mask.save(&dir.join(format!("{stem}_mask.png")))?;
    save_rmz(&out.refined, &dir.join(format!("{stem}.rmz")))?;
    out.mask
        .overlay(&input.image, 0.5)?
        .save(&dir.join(format!("{stem}_overlay.png")))?;
    if args.render {
        render_heatmaps(&dir, stem, &out.refined)?;
    }
    if let Some(cluster) = &out.cluster {
        let file = File::create(dir.join(format!("{stem}_cluster.jsonl"))).map_err(Error::from)?;
        cluster.write_log(BufWriter::new(file))?;
    }
    if !out.transcripts.is_empty() {
        write_json(&dir.join(format!("{stem}_clicks.json")), &out.transcripts)?;
    }
    let mut logged = cfg.clone();
    logged.output_dir = None;
    let run = serde_json::json!({
        "image": args.inputs.image,
        "queries": input.queries,
        "low_confidence": out.refined.low_confidence,
        "degenerate": out.cluster.as_ref().map(|c| c.degenerate),
        "fallback": out.cluster.as_ref().map(|c| c.fallback),
        "iterations": out.cluster.as_ref().map(|c| c.log.len()),
        "config": logged,
    });
    write_json(&dir.join(format!("{stem}_run.json")), &run)?;
    log::info!("segmented {} in {:.2}s", args.inputs.image.display(), out.seconds);
    println!("{}", dir.join(format!("{stem}_mask.png")).display());
    Ok(())
}

fn relevance(args: RelevanceArgs) -> CliResult<()> {
    let cfg = base_config(&args.shared, PipelineConfig::default)?;
    let input = load_inputs(&args.inputs)?;
    let refined = Pipeline::default().relevance(&cfg, &input.image, &input.queries, &input.context)?;
    let dir = output_dir(&cfg)?;
    let path = dir.join(format!("{}.rmz", input.stem));
    save_rmz(&refined, &path)?;
    if args.render {
        render_heatmaps(&dir, &input.stem, &refined)?;
    }
    println!("{}", path.display());
    Ok(())
}

fn dataset_failure(e: Error) -> Failure {
    match e {
        Error::MissingFiles(_) | Error::Dataset(_) | Error::Io(_) => Failure {
            code: EXIT_DATASET,
            message: format!("dataset not found: {e}"),
        },
        other => other.into(),
    }
}

fn evaluate(args: EvaluateArgs) -> CliResult<()> {
    let id: DatasetId = args.dataset.parse()?;
    let mut cfg = base_config(&args.shared, || match id {
        DatasetId::Synthetic => synthetic::pipeline_config(),
        _ => PipelineConfig::default(),
    })?;
    if let Some(m) = &args.method {
        cfg.method = m.parse::<Method>()?;
    }
    let master_seed = cfg.seed;
    let records = match id {
        DatasetId::Synthetic => match &args.root {
            Some(root) => load_synthetic_root(root).map_err(dataset_failure)?,
            None => synthetic::bundled(),
        },
        DatasetId::Voc | DatasetId::ImagenetSeg => {
            let env = id.root_env().expect("file datasets have a root variable");
            let root = args
                .root
                .clone()
                .or_else(|| std::env::var_os(env).map(PathBuf::from))
                .ok_or_else(|| Failure {
                    code: EXIT_DATASET,
                    message: format!("dataset not found: pass --root or set {env}"),
                })?;
            if id == DatasetId::Voc {
                eval::load_voc(&root, &args.split)
            } else {
                eval::load_imagenet_seg(&root)
            }
            .map_err(dataset_failure)?
        }
    };
    let records = match args.subset {
        Some(n) => eval::subset(&records, n, master_seed),
        None => records,
    };
    let prompt_mode = match args.prompt_mode {
        PromptArg::Gt => PromptMode::GroundTruth,
        PromptArg::Single => PromptMode::Single,
        PromptArg::Unknown => PromptMode::Unknown { cutoff: args.cutoff },
    };
    let dir = output_dir(&cfg)?;
    let cache = if args.no_cache {
        None
    } else {
        Some(args.cache.clone().unwrap_or_else(|| dir.join("cache.jsonl")))
    };
    let name = format!("{}-{}", id.as_str(), serde_json::to_value(cfg.method).map_err(Error::from)?.as_str().unwrap_or("run"));
    let configs = vec![BenchmarkConfig::new(name, cfg, prompt_mode)];
    let options = BenchmarkOptions {
        workers: args.workers.max(1),
        cache,
        master_seed,
    };
    let reports = eval::run_benchmark(&Pipeline::default(), &records, &configs, &options)?;
    write_json(&dir.join("report.json"), &reports)?;
    let table = eval::render_table(&reports);
    std::fs::write(dir.join("report.txt"), &table).map_err(Error::from)?;
    print!("{table}");
    Ok(())
}

/// A synthetic dataset previously written with `promptseg synth`.
fn load_synthetic_root(root: &Path) -> promptseg::Result<Vec<eval::DatasetRecord>> {
    let images = root.join("images");
    let masks = root.join("masks");
    if !images.is_dir() || !masks.is_dir() {
        return Err(Error::MissingFiles(vec![images, masks]));
    }
    let mut ids: Vec<String> = std::fs::read_dir(&images)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "png").then(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()))?
        })
        .collect();
    ids.sort();
    let vocabulary = std::sync::Arc::new(synthetic::VOCABULARY.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    ids.into_iter()
        .map(|id| {
            let mask = masks.join(format!("{id}.png"));
            let names = SegmentationMask::load(&mask)?.categories().to_vec();
            Ok(eval::DatasetRecord {
                source: eval::RecordSource::Files {
                    image: images.join(format!("{id}.png")),
                    mask,
                },
                id,
                dataset: DatasetId::Synthetic,
                label_names: names,
                vocabulary: vocabulary.clone(),
            })
        })
        .collect()
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let records = synthetic::write(&args.dir, args.seed)?;
    println!("wrote {} images to {}", records.len(), args.dir.display());
    Ok(())
}
