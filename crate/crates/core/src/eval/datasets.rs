use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::metric::IGNORE;
use crate::error::{Error, Result};
use crate::mask::read_gray8;
use crate::raster::RgbImage;

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

pub const VOC_ROOT_ENV: &str = "PROMPTSEG_VOC_ROOT";
pub const IMAGENET_SEG_ROOT_ENV: &str = "PROMPTSEG_IMAGENETSEG_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Voc,
    ImagenetSeg,
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Voc => "voc",
            Self::ImagenetSeg => "imagenet-seg",
            Self::Synthetic => "synthetic",
        }
    }

    pub fn root_env(self) -> Option<&'static str> {
        match self {
            Self::Voc => Some(VOC_ROOT_ENV),
            Self::ImagenetSeg => Some(IMAGENET_SEG_ROOT_ENV),
            Self::Synthetic => None,
        }
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc" => Ok(Self::Voc),
            "imagenet-seg" => Ok(Self::ImagenetSeg),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset {other:?} (expected voc, imagenet-seg or synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum RecordSource {
    Files { image: PathBuf, mask: PathBuf },
    Memory { image: Arc<RgbImage>, labels: Arc<Array2<u8>> },
}

#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub id: String,
    pub dataset: DatasetId,
    pub source: RecordSource,
    /// Name of ground-truth label `l` is `label_names[l - 1]`.
    pub label_names: Vec<String>,
    /// Candidate prompts for automatic category selection.
    pub vocabulary: Arc<Vec<String>>,
}

/// A loaded ground-truth label map.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub labels: Array2<u8>,
    pub label_names: Vec<String>,
}

impl GroundTruth {
    /// Foreground labels present, ascending.
    pub fn present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        self.labels.iter().for_each(|&l| seen[l as usize] = true);
        (1..IGNORE).filter(|&l| seen[l as usize]).collect()
    }

    pub fn name(&self, label: u8) -> Option<&str> {
        self.label_names.get((label as usize).checked_sub(1)?).map(String::as_str)
    }

    /// Label map with ignore pixels folded into background, for building
    /// mock scenes.
    pub fn scene_labels(&self) -> Array2<u8> {
        self.labels.mapv(|l| if l == IGNORE { 0 } else { l })
    }
}

impl DatasetRecord {
    pub fn image_path(&self) -> Option<&Path> {
        match &self.source {
            RecordSource::Files { image, .. } => Some(image),
            RecordSource::Memory { .. } => None,
        }
    }

    pub fn load(&self) -> Result<(RgbImage, GroundTruth)> {
        let (image, labels) = match &self.source {
            RecordSource::Memory { image, labels } => ((**image).clone(), (**labels).clone()),
            RecordSource::Files { image, mask } => {
                let img = RgbImage::open(image)?;
                let mut labels = read_gray8(mask)?;
                if self.dataset == DatasetId::ImagenetSeg {
                    labels.mapv_inplace(|l| u8::from(l != 0));
                }
                (img, labels)
            }
        };
        if image.shape() != labels.dim() {
            return Err(Error::ShapeMismatch {
                expected: image.shape(),
                actual: labels.dim(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize > self.label_names.len()) {
            return Err(Error::Dataset(format!("{}: label {bad} outside the class list", self.id)));
        }
        Ok((
            image,
            GroundTruth {
                labels,
                label_names: self.label_names.clone(),
            },
        ))
    }
}

fn require(paths: impl IntoIterator<Item = PathBuf>) -> Result<()> {
    let missing: Vec<PathBuf> = paths.into_iter().filter(|p| !p.exists()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFiles(missing))
    }
}

/// Reads a VOC 2012 segmentation split from `root` (the `VOC2012`
/// directory, or a `VOCdevkit` directory containing it).
pub fn load_voc(root: &Path, split: &str) -> Result<Vec<DatasetRecord>> {
    let root = if root.join("VOC2012").is_dir() {
        root.join("VOC2012")
    } else {
        root.to_path_buf()
    };
    let list = root.join("ImageSets").join("Segmentation").join(format!("{split}.txt"));
    require([list.clone(), root.join("JPEGImages"), root.join("SegmentationClass")])?;
    let ids: Vec<String> = std::fs::read_to_string(&list)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let vocabulary: Arc<Vec<String>> = Arc::new(VOC_CLASSES.iter().map(|s| s.to_string()).collect());
    let records: Vec<DatasetRecord> = ids
        .into_iter()
        .map(|id| DatasetRecord {
            source: RecordSource::Files {
                image: root.join("JPEGImages").join(format!("{id}.jpg")),
                mask: root.join("SegmentationClass").join(format!("{id}.png")),
            },
            id,
            dataset: DatasetId::Voc,
            label_names: vocabulary.to_vec(),
            vocabulary: vocabulary.clone(),
        })
        .collect();
    require(records.iter().flat_map(|r| match &r.source {
        RecordSource::Files { image, mask } => vec![image.clone(), mask.clone()],
        RecordSource::Memory { .. } => vec![],
    }))?;
    Ok(records)
}

const IMAGE_EXTENSIONS: [&str; 5] = ["jpg", "JPEG", "jpeg", "png", "JPG"];

/// Reads an extracted ImageNet-Segmentation root: `index.csv` with an
/// `id,category` header, `images/<id>.<jpg|JPEG|png>` and binary
/// `masks/<id>.png`.
pub fn load_imagenet_seg(root: &Path) -> Result<Vec<DatasetRecord>> {
    let index = root.join("index.csv");
    require([index.clone(), root.join("images"), root.join("masks")])?;
    let text = std::fs::read_to_string(&index)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, category) = line
            .split_once(',')
            .ok_or_else(|| Error::Dataset(format!("index.csv line {}: expected id,category", n + 1)))?;
        rows.push((id.trim().to_string(), category.trim().trim_matches('"').to_string()));
    }
    let mut vocabulary: Vec<String> = rows.iter().map(|(_, c)| c.clone()).collect();
    vocabulary.sort();
    vocabulary.dedup();
    let vocabulary = Arc::new(vocabulary);
    let mut missing = Vec::new();
    let mut records = Vec::with_capacity(rows.len());
    for (id, category) in rows {
        let image = IMAGE_EXTENSIONS
            .iter()
            .map(|ext| root.join("images").join(format!("{id}.{ext}")))
            .find(|p| p.exists());
        let mask = root.join("masks").join(format!("{id}.png"));
        if !mask.exists() {
            missing.push(mask.clone());
        }
        let Some(image) = image else {
            missing.push(root.join("images").join(format!("{id}.jpg")));
            continue;
        };
        records.push(DatasetRecord {
            id,
            dataset: DatasetId::ImagenetSeg,
            source: RecordSource::Files { image, mask },
            label_names: vec![category],
            vocabulary: vocabulary.clone(),
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, labels: &Array2<u8>) {
        let (h, w) = labels.dim();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([labels[[y as usize, x as usize]]]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn empty_root_lists_missing_paths() {
        let dir = tempfile::tempdir().unwrap();
        match load_voc(dir.path(), "val") {
            Err(Error::MissingFiles(paths)) => assert_eq!(paths.len(), 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_imagenet_seg(dir.path()), Err(Error::MissingFiles(_))));
    }

    #[test]
    fn tiny_voc_root() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("VOC2012");
        for sub in ["ImageSets/Segmentation", "JPEGImages", "SegmentationClass"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        std::fs::write(root.join("ImageSets/Segmentation/val.txt"), "a\nb\n").unwrap();
        let labels = ndarray::array![[0u8, 15], [IGNORE, 15]];
        for id in ["a", "b"] {
            RgbImage::filled(2, 2, [0.2, 0.4, 0.6]).unwrap().save(&root.join(format!("JPEGImages/{id}.jpg"))).unwrap();
            write_png(&root.join(format!("SegmentationClass/{id}.png")), &labels);
        }
        let records = load_voc(dir.path(), "val").unwrap();
        assert_eq!(records.len(), 2);
        let (_, gt) = records[0].load().unwrap();
        assert_eq!(gt.present(), vec![15]);
        assert_eq!(gt.name(15), Some("person"));
        std::fs::remove_file(root.join("SegmentationClass/b.png")).unwrap();
        match load_voc(dir.path(), "val") {
            Err(Error::MissingFiles(paths)) => assert!(paths[0].ends_with("SegmentationClass/b.png")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn imagenet_seg_masks_are_binary() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        std::fs::write(dir.path().join("index.csv"), "id,category\nx1,goldfish\nx2,tabby\n").unwrap();
        for id in ["x1", "x2"] {
            RgbImage::filled(2, 3, [0.5; 3]).unwrap().save(&dir.path().join(format!("images/{id}.png"))).unwrap();
            write_png(&dir.path().join(format!("masks/{id}.png")), &ndarray::array![[0u8, 255, 255], [0, 0, 255]]);
        }
        let records = load_imagenet_seg(dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].vocabulary.len(), 2);
        let (_, gt) = records[1].load().unwrap();
        assert!(gt.labels.iter().all(|&l| l <= 1));
        assert_eq!(gt.name(1), Some("tabby"));
    }
}
