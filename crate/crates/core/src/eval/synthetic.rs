//! A small procedurally generated dataset: flat-ish colored shapes on a
//! shaded, lightly textured background.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::datasets::{DatasetId, DatasetRecord, RecordSource};
use crate::error::Result;
use crate::mask::SegmentationMask;
use crate::pipeline::PipelineConfig;
use crate::raster::RgbImage;
use crate::seed;
use crate::tta::CropGridSpec;

pub const SIZE: usize = 64;
pub const COUNT: usize = 10;

pub const VOCABULARY: [&str; 10] = [
    "aeroplane", "bicycle", "bottle", "chair", "cow", "dog", "horse", "sheep", "sofa", "train",
];

/// Fixed seed of the bundled dataset.
pub const BUNDLED_SEED: u64 = 2023;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, r: usize, c: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => (y0..y0 + h).contains(&r) && (x0..x0 + w).contains(&c),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let rgb = match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|x| x as f32)
}

/// One generated image with its label map (`1..=n` objects) and names.
pub fn generate(index: usize, seed: u64) -> (RgbImage, Array2<u8>, Vec<String>) {
    let mut rng = seed::rng(seed::derive(seed, &[&"synthetic", &index]));
    let n = 2 + index % 2;
    let mut names: Vec<&str> = VOCABULARY.to_vec();
    names.shuffle(&mut rng);
    let names: Vec<String> = names[..n].iter().map(|s| s.to_string()).collect();

    let mut labels = Array2::<u8>::zeros((SIZE, SIZE));
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n {
        attempts += 1;
        let h = rng.random_range(16..=26);
        let w = rng.random_range(16..=26);
        let y0 = rng.random_range(2..SIZE - h - 2);
        let x0 = rng.random_range(2..SIZE - w - 2);
        let shape = if rng.random_bool(0.5) || attempts > 500 {
            Shape::Rect { y0, x0, h, w }
        } else {
            Shape::Ellipse {
                cy: y0 as f64 + h as f64 / 2.0,
                cx: x0 as f64 + w as f64 / 2.0,
                ry: h as f64 / 2.0,
                rx: w as f64 / 2.0,
            }
        };
        // keep a two-pixel gap to earlier objects
        let clear = (y0.saturating_sub(2)..(y0 + h + 2).min(SIZE))
            .all(|r| (x0.saturating_sub(2)..(x0 + w + 2).min(SIZE)).all(|c| labels[[r, c]] == 0));
        if !clear {
            continue;
        }
        placed += 1;
        for r in y0..y0 + h {
            for c in x0..x0 + w {
                if shape.contains(r, c) {
                    labels[[r, c]] = placed as u8;
                }
            }
        }
    }

    let base_hue: f64 = rng.random();
    let top = hsv(base_hue, 0.15, 0.35);
    let bottom = hsv((base_hue + 0.1) % 1.0, 0.2, 0.55);
    let colors: Vec<[f32; 3]> = (0..n)
        .map(|i| hsv((base_hue + 0.25 + i as f64 / n as f64 * 0.6) % 1.0, 0.8, 0.9))
        .collect();
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let jitter: Vec<f32> = (0..SIZE * SIZE * 3).map(|_| noise.sample(&mut rng) as f32).collect();
    let image = RgbImage::from_fn(SIZE, SIZE, |r, c| {
        let l = labels[[r, c]];
        let base = if l == 0 {
            let t = r as f32 / (SIZE - 1) as f32;
            std::array::from_fn(|k| top[k] * (1.0 - t) + bottom[k] * t)
        } else {
            colors[l as usize - 1]
        };
        std::array::from_fn(|k| (base[k] + jitter[(r * SIZE + c) * 3 + k]).clamp(0.0, 1.0))
    })
    .expect("valid synthetic raster");
    (image, labels, names)
}

/// The ten-image dataset for `seed`.
pub fn dataset(seed: u64) -> Vec<DatasetRecord> {
    let vocabulary: Arc<Vec<String>> = Arc::new(VOCABULARY.iter().map(|s| s.to_string()).collect());
    (0..COUNT)
        .map(|i| {
            let (image, labels, names) = generate(i, seed);
            DatasetRecord {
                id: format!("synthetic_{i:02}"),
                dataset: DatasetId::Synthetic,
                source: RecordSource::Memory {
                    image: Arc::new(image),
                    labels: Arc::new(labels),
                },
                label_names: names,
                vocabulary: vocabulary.clone(),
            }
        })
        .collect()
}

pub fn bundled() -> Vec<DatasetRecord> {
    dataset(BUNDLED_SEED)
}

/// Pipeline settings the synthetic benchmark runs with: a noisy, blurred,
/// patch-pooled mock backend, crops half the image size and a shorter
/// clustering budget.
pub fn pipeline_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.backend.mock.noise_sigma = 0.05;
    cfg.backend.mock.blur_radius = 1;
    cfg.backend.mock.patch_grid = Some(8);
    cfg.grid = CropGridSpec {
        crop_size: 32,
        stride: 16,
        gate_threshold: 0.3,
    };
    cfg.cluster.max_iters = 100;
    cfg
}

/// Writes `images/<id>.png` and `masks/<id>.png` (with name sidecars).
pub fn write(dir: &Path, seed: u64) -> Result<Vec<DatasetRecord>> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let records = dataset(seed);
    for record in &records {
        let (image, gt) = record.load()?;
        image.save(&dir.join("images").join(format!("{}.png", record.id)))?;
        SegmentationMask::new(gt.labels, gt.label_names)?.save(&dir.join("masks").join(format!("{}.png", record.id)))?;
    }
    Ok(records)
}
