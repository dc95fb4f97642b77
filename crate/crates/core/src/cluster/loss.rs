//! Loss terms over an `(h, w, q)` response field, each returning its value
//! and gradient with respect to the responses.

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::fusion::Pixel;

#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Array3<f64>,
}

impl Loss {
    fn zero(shape: (usize, usize, usize)) -> Self {
        Self {
            value: 0.0,
            grad: Array3::zeros(shape),
        }
    }
}

/// Per-pixel argmax over the last axis, ties to the lower index.
pub fn hard_labels(logits: ArrayView3<'_, f64>) -> Array2<usize> {
    logits.map_axis(Axis(2), |v| {
        let mut best = 0;
        for (k, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = k;
            }
        }
        best
    })
}

/// Mean L1 response difference over horizontal neighbor pairs plus the same
/// over vertical pairs. A direction with no pairs contributes zero.
pub fn continuity_loss(logits: ArrayView3<'_, f64>) -> Loss {
    let (h, w, q) = logits.dim();
    let mut out = Loss::zero((h, w, q));
    let mut term = |dr: usize, dc: usize| {
        let pairs = (h - dr) * (w - dc);
        if pairs == 0 {
            return;
        }
        let scale = 1.0 / pairs as f64;
        for r in 0..h - dr {
            for c in 0..w - dc {
                for k in 0..q {
                    let d = logits[[r, c, k]] - logits[[r + dr, c + dc, k]];
                    out.value += d.abs() * scale;
                    let s = d.signum() * scale * (d != 0.0) as u8 as f64;
                    out.grad[[r, c, k]] += s;
                    out.grad[[r + dr, c + dc, k]] -= s;
                }
            }
        }
    };
    term(0, 1);
    term(1, 0);
    out
}

/// Mean softmax cross-entropy of each listed pixel against its target index.
pub fn cross_entropy(logits: ArrayView3<'_, f64>, targets: &[(Pixel, usize)]) -> Loss {
    let mut out = Loss::zero(logits.dim());
    if targets.is_empty() {
        return out;
    }
    let scale = 1.0 / targets.len() as f64;
    for &(p, t) in targets {
        let v = logits.slice(ndarray::s![p.y, p.x, ..]);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.value += (z.ln() + max - v[t]) * scale;
        for (k, e) in exps.iter().enumerate() {
            let indicator = if k == t { 1.0 } else { 0.0 };
            out.grad[[p.y, p.x, k]] += (e / z - indicator) * scale;
        }
    }
    out
}

/// Cross-entropy against the response's own (detached) argmax labels.
pub fn self_distill_loss(logits: ArrayView3<'_, f64>) -> Loss {
    let labels = hard_labels(logits);
    let targets: Vec<(Pixel, usize)> = labels.indexed_iter().map(|((r, c), &t)| (Pixel::new(c, r), t)).collect();
    cross_entropy(logits, &targets)
}

/// Mean cross-entropy at sampled pixels; `targets` already carry the cluster
/// index each sample maps to. An empty batch contributes zero.
pub fn scribble_loss(logits: ArrayView3<'_, f64>, targets: &[(Pixel, usize)]) -> Loss {
    if targets.is_empty() {
        log::warn!("empty scribble batch");
    }
    cross_entropy(logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn constant_field_has_no_continuity_cost() {
        let l = continuity_loss(Array3::from_elem((3, 4, 2), 0.7).view());
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn one_by_two_continuity() {
        let logits = array![[[1.0, 0.0], [0.0, 1.0]]];
        assert_eq!(continuity_loss(logits.view()).value, 2.0);
        assert_eq!(continuity_loss((logits * 2.0).view()).value, 4.0);
    }

    #[test]
    fn two_class_cross_entropy() {
        let logits = array![[[2.0, 1.0]]];
        let l = self_distill_loss(logits.view());
        assert!((l.value - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn uniform_logits_cost_ln_q() {
        let logits = Array3::<f64>::zeros((2, 2, 4));
        assert!((self_distill_loss(logits.view()).value - 4f64.ln()).abs() < 1e-12);
        let one = scribble_loss(logits.view(), &[(Pixel::new(1, 0), 3)]);
        assert!((one.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_targets_cost_nothing() {
        let mut logits = Array3::<f64>::zeros((2, 2, 3));
        logits[[0, 1, 2]] = 60.0;
        let l = scribble_loss(logits.view(), &[(Pixel::new(1, 0), 2)]);
        assert!(l.value < 1e-20);
    }

    #[test]
    fn scribble_is_mean_of_samples() {
        // per-pixel CE of ln(1 + e^-d) for a two-class pixel with margin d
        let ce = |d: f64| (1.0 + (-d).exp()).ln();
        let d1 = -((0.2f64).exp() - 1.0).ln();
        let d2 = -((0.6f64).exp() - 1.0).ln();
        assert!((ce(d1) - 0.2).abs() < 1e-12);
        let logits = array![[[d1, 0.0], [d2, 0.0]]];
        let l = scribble_loss(logits.view(), &[(Pixel::new(0, 0), 0), (Pixel::new(1, 0), 0)]);
        assert!((l.value - 0.4).abs() < 1e-12);
        assert_eq!(scribble_loss(logits.view(), &[]).value, 0.0);
    }
}
