use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;

/// Ground-truth label excluded from both intersection and union.
pub const IGNORE: u8 = 255;

/// For each ground-truth segment (nonzero class), the IoU of the predicted
/// segment (nonzero label region) overlapping it best, averaged over
/// ground-truth segments. `None` when the ground truth has no foreground.
pub fn best_match_miou(gt: &SegmentationMask, pred: &SegmentationMask) -> Result<Option<f64>> {
    best_match_labels(gt.labels(), pred.labels(), None)
}

/// Label-map form of [`best_match_miou`]. Pixels labeled [`IGNORE`] in `gt`
/// are skipped; `segments` restricts which ground-truth classes are scored.
pub fn best_match_labels(gt: &Array2<u8>, pred: &Array2<u8>, segments: Option<&[u8]>) -> Result<Option<f64>> {
    if gt.dim() != pred.dim() {
        return Err(Error::ShapeMismatch {
            expected: gt.dim(),
            actual: pred.dim(),
        });
    }
    let mut joint = vec![[0u64; 256]; 256];
    let mut gt_area = [0u64; 256];
    let mut pred_area = [0u64; 256];
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        if g == IGNORE {
            continue;
        }
        joint[g as usize][p as usize] += 1;
        gt_area[g as usize] += 1;
        pred_area[p as usize] += 1;
    }
    let scored: Vec<usize> = (1..IGNORE as usize)
        .filter(|&g| gt_area[g] > 0)
        .filter(|&g| segments.is_none_or(|s| s.contains(&(g as u8))))
        .collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let total: f64 = scored
        .iter()
        .map(|&g| {
            (1..256)
                .filter(|&p| joint[g][p] > 0)
                .map(|p| {
                    let inter = joint[g][p];
                    inter as f64 / (gt_area[g] + pred_area[p] - inter) as f64
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(Some(total / scored.len() as f64))
}
