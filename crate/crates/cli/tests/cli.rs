use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use promptseg::archive::load_rmz;
use promptseg::backend::{MockScene, SceneContext};
use promptseg::eval::{best_match_miou, synthetic};
use promptseg::mask::{read_gray8, SegmentationMask};
use promptseg::pipeline::{Pipeline, PipelineConfig};
use promptseg::raster::RgbImage;

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .env_remove("PROMPTSEG_VOC_ROOT")
        .env_remove("PROMPTSEG_IMAGENETSEG_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    synthetic::write(&root.join("syn"), synthetic::BUNDLED_SEED).unwrap();
    let config = root.join("config.json");
    std::fs::write(&config, synthetic::pipeline_config().to_json().unwrap()).unwrap();
    Fixture { _dir: dir, root, config }
}

impl Fixture {
    fn image(&self, i: usize) -> PathBuf {
        self.root.join(format!("syn/images/synthetic_{i:02}.png"))
    }
    fn scene(&self, i: usize) -> PathBuf {
        self.root.join(format!("syn/masks/synthetic_{i:02}.png"))
    }
}

#[test]
fn segment_recovers_synthetic_scene() {
    let fx = fixture();
    let out_a = fx.root.join("a");
    let run = |out: &Path| {
        promptseg(&[
            "segment",
            s(&fx.image(2)),
            "--scene",
            s(&fx.scene(2)),
            "--config",
            s(&fx.config),
            "--method",
            "cluster",
            "--out",
            s(out),
        ])
    };
    let res = run(&out_a);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for name in ["synthetic_02_mask.png", "synthetic_02_mask.json", "synthetic_02.rmz", "synthetic_02_overlay.png", "synthetic_02_run.json", "synthetic_02_cluster.jsonl"] {
        assert!(out_a.join(name).is_file(), "{name}");
    }
    let gt = SegmentationMask::load(&fx.scene(2)).unwrap();
    let pred = SegmentationMask::load(&out_a.join("synthetic_02_mask.png")).unwrap();
    let iou = best_match_miou(&gt, &pred).unwrap().unwrap();
    assert!(iou >= 0.9, "{iou}");

    let out_b = fx.root.join("b");
    assert_eq!(code(&run(&out_b)), 0);
    for name in ["synthetic_02_mask.png", "synthetic_02.rmz", "synthetic_02_run.json", "synthetic_02_cluster.jsonl"] {
        assert_eq!(std::fs::read(out_a.join(name)).unwrap(), std::fs::read(out_b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn interactive_segment_writes_transcript() {
    let fx = fixture();
    let out = fx.root.join("o");
    let res = promptseg(&[
        "segment", s(&fx.image(1)), "--scene", s(&fx.scene(1)), "--method", "interactive", "--clicks", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = std::fs::read_to_string(out.join("synthetic_01_clicks.json")).unwrap();
    let transcripts: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(transcripts.as_array().unwrap().len(), 3);
}

#[test]
fn full_threshold_gives_background() {
    let fx = fixture();
    let out = fx.root.join("o");
    let res = promptseg(&[
        "segment", s(&fx.image(4)), "--scene", s(&fx.scene(4)), "--method", "threshold", "--threshold", "1.0", "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(read_gray8(&out.join("synthetic_04_mask.png")).unwrap().iter().all(|&l| l == 0));
}

#[test]
fn missing_image_is_a_usage_error() {
    let res = promptseg(&["segment", "/no/such/picture.png", "--prompts", "cat"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("/no/such/picture.png"));
}

#[test]
fn bad_flags_and_backends() {
    let fx = fixture();
    let img = fx.image(2);
    let scene = fx.scene(2);
    let out = fx.root.join("o");
    let bad_views = promptseg(&["segment", s(&img), "--scene", s(&scene), "--views", "sideways", "--out", s(&out)]);
    assert_eq!(code(&bad_views), 2);
    let bad_backend = promptseg(&["segment", s(&img), "--scene", s(&scene), "--backend", "clip-vit", "--out", s(&out)]);
    assert_eq!(code(&bad_backend), 3);
    let no_scene = promptseg(&["segment", s(&img), "--prompts", "cow", "--out", s(&out)]);
    assert_eq!(code(&no_scene), 3);
    let no_signal = promptseg(&["segment", s(&img), "--scene", s(&scene), "--prompts", "unicorn", "--out", s(&out)]);
    assert_eq!(code(&no_signal), 4, "{}", stderr(&no_signal));
    assert_eq!(code(&promptseg(&["segment", s(&img), "--out", s(&out)])), 2);
}

#[test]
fn relevance_archive_matches_library() {
    let fx = fixture();
    let out = fx.root.join("o");
    let names = SegmentationMask::load(&fx.scene(3)).unwrap().categories().to_vec();
    let wanted = names[1].clone();
    let res = promptseg(&[
        "relevance", s(&fx.image(3)), "--scene", s(&fx.scene(3)), "--prompts", &wanted, "--config", s(&fx.config), "--render", "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let archived = load_rmz(&out.join("synthetic_03.rmz")).unwrap();
    assert_eq!(archived.categories(), vec![wanted.clone()]);
    assert!(out.join(format!("synthetic_03_{wanted}.png")).is_file());

    let image = RgbImage::open(&fx.image(3)).unwrap();
    let labels = read_gray8(&fx.scene(3)).unwrap();
    let context = SceneContext {
        scene: Some(MockScene::from_labels(&labels, &names)),
    };
    let cfg = PipelineConfig::load(&fx.config).unwrap();
    let direct = Pipeline::default().relevance(&cfg, &image, &[wanted], &context).unwrap();
    assert_eq!(archived, direct);
}

fn tiny_voc(root: &Path, n: usize) {
    let voc = root.join("VOC2012");
    for sub in ["ImageSets/Segmentation", "JPEGImages", "SegmentationClass"] {
        std::fs::create_dir_all(voc.join(sub)).unwrap();
    }
    let ids: Vec<String> = (0..n).map(|i| format!("2007_{i:06}")).collect();
    std::fs::write(voc.join("ImageSets/Segmentation/val.txt"), ids.join("\n")).unwrap();
    for (i, id) in ids.iter().enumerate() {
        let labels = Array2::from_shape_fn((16, 16), |(r, c)| {
            if (4..12).contains(&r) && (2 + i % 4..10 + i % 4).contains(&c) {
                (1 + i % 20) as u8
            } else {
                0
            }
        });
        RgbImage::from_fn(16, 16, |r, c| if labels[[r, c]] > 0 { [0.8, 0.3, 0.2] } else { [0.2, 0.3, 0.4] })
            .unwrap()
            .save(&voc.join(format!("JPEGImages/{id}.jpg")))
            .unwrap();
        image::GrayImage::from_fn(16, 16, |x, y| image::Luma([labels[[y as usize, x as usize]]]))
            .save(voc.join(format!("SegmentationClass/{id}.png")))
            .unwrap();
    }
}

#[test]
fn voc_subset_evaluation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    tiny_voc(dir.path(), 40);
    let run = |out: &str, cache: bool| {
        let out = dir.path().join(out);
        let mut args = vec![
            "evaluate", "--dataset", "voc", "--root", s(dir.path()), "--subset", "25", "--seed", "7", "--method", "threshold", "--out", s(&out),
        ];
        if !cache {
            args.push("--no-cache");
        }
        let res = promptseg(&args);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        let images: Vec<(String, f64)> = report[0]["images"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| (r["id"].as_str().unwrap().to_string(), r["iou"].as_f64().unwrap()))
            .collect();
        (images, std::fs::read(out.join("report.json")).unwrap())
    };
    let (first, _) = run("a", false);
    let (second, _) = run("b", false);
    assert_eq!(first.len(), 25);
    assert_eq!(first, second);

    let (_, cached_once) = run("c", true);
    let (_, cached_twice) = run("c", true);
    assert_eq!(cached_once, cached_twice);
}

#[test]
fn missing_dataset_roots_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("nowhere");
    let res = promptseg(&["evaluate", "--dataset", "imagenet-seg", "--root", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&res), 5);
    let res = promptseg(&["evaluate", "--dataset", "voc", "--out", s(dir.path())]);
    assert_eq!(code(&res), 5);
    assert!(stderr(&res).contains("PROMPTSEG_VOC_ROOT"));
}

#[test]
fn synthetic_threshold_evaluation_from_disk() {
    let fx = fixture();
    let out = fx.root.join("o");
    let res = promptseg(&[
        "evaluate", "--dataset", "synthetic", "--root", s(&fx.root.join("syn")), "--method", "threshold", "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let table = String::from_utf8(res.stdout).unwrap();
    assert!(table.contains("synthetic-threshold"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["scored"], 10);
}
