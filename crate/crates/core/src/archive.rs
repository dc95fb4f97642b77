//! The `.rmz` relevance archive.
//!
//! A zip file holding `meta.json` and, for each category `i` (0-based, in
//! the order of `meta.json`'s `categories`), `cat_<i>.f32`: row-major
//! little-endian `f32` scores of length `height * width`.

use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;

use crate::backend::{BackendDescriptor, RelevanceMap};
use crate::error::{Error, Result};
use crate::tta::{CropGridSpec, RefinedRelevance, ViewKind};

pub const FORMAT: &str = "rmz/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmzMeta {
    pub format: String,
    pub height: usize,
    pub width: usize,
    pub categories: Vec<String>,
    pub low_confidence: Vec<bool>,
    pub views: Vec<ViewKind>,
    pub grid: CropGridSpec,
    pub distractors: Vec<String>,
    pub backend: BackendDescriptor,
    pub seed: u64,
}

pub fn entry_name(index: usize) -> String {
    format!("cat_{index}.f32")
}

pub fn write_rmz<W: Write + Seek>(refined: &RefinedRelevance, sink: W) -> Result<()> {
    let (height, width) = refined.shape();
    let meta = RmzMeta {
        format: FORMAT.into(),
        height,
        width,
        categories: refined.categories(),
        low_confidence: refined.low_confidence.clone(),
        views: refined.views.clone(),
        grid: refined.grid,
        distractors: refined.distractors.clone(),
        backend: refined.backend.clone(),
        seed: refined.seed,
    };
    let mut zip = zip::ZipWriter::new(sink);
    // fixed timestamp keeps archives byte-identical across runs
    let options = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated)
        .last_modified_time(zip::DateTime::default());
    zip.start_file("meta.json", options)?;
    zip.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
    for (i, map) in refined.maps.iter().enumerate() {
        zip.start_file(entry_name(i), options)?;
        let bytes: Vec<u8> = map.scores().iter().flat_map(|v| v.to_le_bytes()).collect();
        zip.write_all(&bytes)?;
    }
    zip.finish()?;
    Ok(())
}

pub fn read_rmz<R: Read + Seek>(source: R) -> Result<RefinedRelevance> {
    let mut zip = zip::ZipArchive::new(source)?;
    let meta: RmzMeta = {
        let mut text = String::new();
        zip.by_name("meta.json")?.read_to_string(&mut text)?;
        serde_json::from_str(&text)?
    };
    if meta.format != FORMAT {
        return Err(Error::Archive(format!("unsupported format {:?}", meta.format)));
    }
    if meta.low_confidence.len() != meta.categories.len() {
        return Err(Error::Archive("low_confidence length differs from categories".into()));
    }
    let expected = meta.height * meta.width * 4;
    let mut maps = Vec::with_capacity(meta.categories.len());
    for (i, category) in meta.categories.iter().enumerate() {
        let mut bytes = Vec::with_capacity(expected);
        zip.by_name(&entry_name(i))?.read_to_end(&mut bytes)?;
        if bytes.len() != expected {
            return Err(Error::Archive(format!(
                "{} holds {} bytes, expected {expected}",
                entry_name(i),
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let scores = Array2::from_shape_vec((meta.height, meta.width), values)
            .map_err(|e| Error::Archive(e.to_string()))?;
        maps.push(RelevanceMap::new(scores, category.as_str())?);
    }
    Ok(RefinedRelevance {
        maps,
        low_confidence: meta.low_confidence,
        views: meta.views,
        distractors: meta.distractors,
        grid: meta.grid,
        seed: meta.seed,
        backend: meta.backend,
    })
}

pub fn save_rmz(refined: &RefinedRelevance, path: &Path) -> Result<()> {
    let mut buffer = Cursor::new(Vec::new());
    write_rmz(refined, &mut buffer)?;
    std::fs::write(path, buffer.into_inner())?;
    Ok(())
}

pub fn load_rmz(path: &Path) -> Result<RefinedRelevance> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingFiles(vec![path.to_path_buf()]))?;
    read_rmz(Cursor::new(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refined(maps: Vec<Array2<f32>>) -> RefinedRelevance {
        let k = maps.len();
        RefinedRelevance {
            maps: maps
                .into_iter()
                .enumerate()
                .map(|(i, m)| RelevanceMap::new(m, format!("cat{i}")).unwrap())
                .collect(),
            low_confidence: vec![false; k],
            views: vec![ViewKind::Identity, ViewKind::Crop],
            distractors: vec!["bird".into()],
            grid: CropGridSpec::default(),
            seed: 99,
            backend: BackendDescriptor::new("mock", 224, (7, 7)).unwrap(),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            h in 1usize..12,
            w in 1usize..12,
            k in 1usize..4,
            bits in proptest::collection::vec(any::<u32>(), 432),
        ) {
            let maps: Vec<Array2<f32>> = (0..k)
                .map(|i| Array2::from_shape_fn((h, w), |(r, c)| {
                    // any finite bit pattern must survive
                    let v = f32::from_bits(bits[(i * 144 + r * 12 + c) % bits.len()]);
                    if v.is_finite() { v } else { 0.5 }
                }))
                .collect();
            let original = refined(maps);
            let mut buffer = Cursor::new(Vec::new());
            write_rmz(&original, &mut buffer).unwrap();
            let back = read_rmz(Cursor::new(buffer.into_inner())).unwrap();
            prop_assert_eq!(back.categories(), original.categories());
            for (a, b) in back.maps.iter().zip(&original.maps) {
                let same = a.scores().iter().zip(b.scores()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
            prop_assert_eq!(back, original);
        }
    }

    #[test]
    fn archives_are_byte_identical() {
        let r = refined(vec![Array2::from_elem((3, 3), 0.25)]);
        let mut a = Cursor::new(Vec::new());
        let mut b = Cursor::new(Vec::new());
        write_rmz(&r, &mut a).unwrap();
        write_rmz(&r, &mut b).unwrap();
        assert_eq!(a.into_inner(), b.into_inner());
    }

    #[test]
    fn truncated_entry_is_rejected() {
        let r = refined(vec![Array2::from_elem((3, 3), 0.25)]);
        let mut buffer = Cursor::new(Vec::new());
        {
            let mut zip = zip::ZipWriter::new(&mut buffer);
            let opts = SimpleFileOptions::default();
            zip.start_file("meta.json", opts).unwrap();
            let meta = RmzMeta {
                format: FORMAT.into(),
                height: 3,
                width: 3,
                categories: r.categories(),
                low_confidence: vec![false],
                views: r.views.clone(),
                grid: r.grid,
                distractors: vec![],
                backend: r.backend.clone(),
                seed: 0,
            };
            zip.write_all(serde_json::to_string(&meta).unwrap().as_bytes()).unwrap();
            zip.start_file("cat_0.f32", opts).unwrap();
            zip.write_all(&[0u8; 8]).unwrap();
            zip.finish().unwrap();
        }
        assert!(matches!(read_rmz(Cursor::new(buffer.into_inner())), Err(Error::Archive(_))));
    }
}
