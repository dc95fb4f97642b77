use std::collections::VecDeque;

use ndarray::Array2;

use super::{BinaryMask, InteractiveSegmenter};
use crate::backend::MockScene;
use crate::error::{Error, Result};
use crate::fusion::Pixel;
use crate::raster::{RgbImage, SourceFrame};

/// Region grower over the connected components of a ground-truth scene.
///
/// Every 4-connected region of constant scene label scores
/// `(positives - negatives) / total positives`, clamped to `[0, 1]`.
pub struct MockClickSegmenter {
    scene: MockScene,
    frame: Option<(SourceFrame, (usize, usize))>,
    components: Array2<usize>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    total_positive: usize,
}

impl MockClickSegmenter {
    pub fn new(scene: MockScene) -> Self {
        Self {
            scene,
            frame: None,
            components: Array2::zeros((0, 0)),
            positives: Vec::new(),
            negatives: Vec::new(),
            total_positive: 0,
        }
    }
}

fn scene_labels(scene: &MockScene) -> Array2<usize> {
    let mut labels = Array2::zeros(scene.shape());
    for (i, name) in scene.categories().enumerate().collect::<Vec<_>>().into_iter().rev() {
        if let Some(mask) = scene.mask(name) {
            ndarray::Zip::from(&mut labels).and(mask).for_each(|l, &m| {
                if m {
                    *l = i + 1;
                }
            });
        }
    }
    labels
}

/// 4-connected components of equal labels, numbered from 0 in raster order.
fn components(labels: &Array2<usize>) -> (Array2<usize>, usize) {
    let (h, w) = labels.dim();
    let mut out = Array2::from_elem((h, w), usize::MAX);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let (r0, c0) = (start / w, start % w);
        if out[[r0, c0]] != usize::MAX {
            continue;
        }
        out[[r0, c0]] = next;
        queue.push_back((r0, c0));
        while let Some((r, c)) = queue.pop_front() {
            let neighbors = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for (nr, nc) in neighbors {
                if nr < h && nc < w && out[[nr, nc]] == usize::MAX && labels[[nr, nc]] == labels[[r, c]] {
                    out[[nr, nc]] = next;
                    queue.push_back((nr, nc));
                }
            }
        }
        next += 1;
    }
    (out, next)
}

impl InteractiveSegmenter for MockClickSegmenter {
    fn set_image(&mut self, image: &RgbImage) -> Result<()> {
        let frame = *image.frame();
        if (frame.source_height, frame.source_width) != self.scene.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.scene.shape(),
                actual: (frame.source_height, frame.source_width),
            });
        }
        let source = scene_labels(&self.scene);
        let (h, w) = image.shape();
        // regions are traced in view coordinates; unmapped pixels form their own label
        let view = Array2::from_shape_fn((h, w), |(r, c)| {
            frame.map(r, c).map_or(usize::MAX, |(sr, sc)| source[[sr, sc]])
        });
        let (comps, n) = components(&view);
        self.components = comps;
        self.positives = vec![0; n];
        self.negatives = vec![0; n];
        self.total_positive = 0;
        self.frame = Some((frame, (h, w)));
        Ok(())
    }

    fn click(&mut self, pixel: Pixel, positive: bool) -> Result<()> {
        let (_, (h, w)) = self
            .frame
            .ok_or_else(|| Error::ModelUnavailable("click before set_image".into()))?;
        if pixel.x >= w || pixel.y >= h {
            return Err(Error::InvalidArgument(format!("click ({}, {}) out of bounds", pixel.x, pixel.y)));
        }
        let comp = self.components[[pixel.y, pixel.x]];
        if positive {
            self.positives[comp] += 1;
            self.total_positive += 1;
        } else {
            self.negatives[comp] += 1;
        }
        Ok(())
    }

    fn result(&self) -> Result<BinaryMask> {
        let (_, shape) = self
            .frame
            .ok_or_else(|| Error::ModelUnavailable("result before set_image".into()))?;
        if self.total_positive == 0 {
            return Ok(BinaryMask::empty(shape));
        }
        let scores: Vec<f32> = self
            .positives
            .iter()
            .zip(&self.negatives)
            .map(|(&p, &n)| ((p as f32 - n as f32) / self.total_positive as f32).clamp(0.0, 1.0))
            .collect();
        Ok(BinaryMask::from_confidence(self.components.mapv(|c| scores[c])))
    }

    fn reset(&mut self) {
        self.positives.iter_mut().for_each(|v| *v = 0);
        self.negatives.iter_mut().for_each(|v| *v = 0);
        self.total_positive = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interactive::{plan_clicks, segment_category, ClickPlan};
    use ndarray::array;

    fn scene() -> MockScene {
        let labels = array![[0u8, 1, 1, 0], [0, 1, 1, 0], [2, 2, 0, 0], [2, 2, 0, 1]];
        MockScene::from_labels(&labels, &["a".into(), "b".into()])
    }

    #[test]
    fn clicks_inside_a_region_return_it() {
        let mut model = MockClickSegmenter::new(scene());
        let image = RgbImage::filled(4, 4, [0.5; 3]).unwrap();
        let plan = ClickPlan {
            category: 1,
            positives: vec![Pixel::new(1, 0), Pixel::new(2, 1), Pixel::new(1, 1)],
            negatives: vec![Pixel::new(0, 0)],
            seed: 0,
        };
        let (mask, events) = segment_category(&mut model, &image, &plan).unwrap();
        let expected = array![[false, true, true, false], [false, true, true, false], [false; 4], [false; 4]];
        assert_eq!(mask.mask, expected);
        assert_eq!(events.len(), 4);
        assert!(events[..3].iter().all(|e| e.positive));
    }

    #[test]
    fn negatives_block_a_region() {
        let mut model = MockClickSegmenter::new(scene());
        let image = RgbImage::filled(4, 4, [0.5; 3]).unwrap();
        model.set_image(&image).unwrap();
        model.click(Pixel::new(0, 2), true).unwrap();
        model.click(Pixel::new(1, 3), false).unwrap();
        assert!(model.result().unwrap().mask.iter().all(|&m| !m));
    }

    #[test]
    fn empty_plan_is_rejected() {
        let mut model = MockClickSegmenter::new(scene());
        let image = RgbImage::filled(4, 4, [0.5; 3]).unwrap();
        let plan = ClickPlan {
            category: 1,
            positives: vec![],
            negatives: vec![],
            seed: 0,
        };
        assert!(segment_category(&mut model, &image, &plan).is_err());
    }

    #[test]
    fn separate_components_of_one_label() {
        let labels = array![[1usize, 0, 1]];
        let (comps, n) = components(&labels);
        assert_eq!(n, 3);
        assert_eq!(comps, array![[0usize, 1, 2]]);
    }

    #[test]
    fn plans_on_the_scene_are_usable() {
        let rel = crate::fusion::MultiClassRelevance::from_channels(
            vec!["a".into()],
            vec![array![[0.0f32, 1.0, 1.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.0; 4], [0.0; 4]]],
        )
        .unwrap();
        let plan = plan_clicks(&rel, 1, 3, 3, 0.05, 4).unwrap();
        let mut model = MockClickSegmenter::new(scene());
        let image = RgbImage::filled(4, 4, [0.5; 3]).unwrap();
        let (mask, _) = segment_category(&mut model, &image, &plan).unwrap();
        assert_eq!(mask.mask.iter().filter(|&&m| m).count(), 4);
    }
}
