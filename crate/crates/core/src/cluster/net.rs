//! A three-layer 3x3 convolutional labeling network with hand-written
//! backpropagation.
//!
//! Activations are stored as `(channels, pixels)` matrices so each
//! convolution is a single GEMM against an im2col buffer.

use ndarray::{Array1, Array2, Axis, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, Uniform};


struct Layer<F> {
    weight: Array2<F>,
    bias: Array1<F>,
    gamma: Array1<F>,
    beta: Array1<F>,
    relu: bool,
    /// Learnable scale and shift after normalization.
    affine: bool,
    velocity: Option<Grads<F>>,
}

struct Grads<F> {
    weight: Array2<F>,
    bias: Array1<F>,
    gamma: Array1<F>,
    beta: Array1<F>,
}

struct Cache<F> {
    cols: Array2<F>,
    /// Post-activation, pre-normalization (needed for the ReLU mask).
    act: Array2<F>,
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub struct LabelNet<F = f32> {
    height: usize,
    width: usize,
    layers: Vec<Layer<F>>,
    caches: Vec<Cache<F>>,
}

impl<F: NdFloat + FromPrimitive> LabelNet<F> {
    /// `in_channels -> hidden -> hidden -> out_channels`, randomly initialized.
    pub fn new<R: Rng>(
        height: usize,
        width: usize,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let shapes = [(in_channels, hidden, true), (hidden, hidden, true), (hidden, out_channels, false)];
        let layers = shapes
            .iter()
            .map(|&(cin, cout, relu)| {
                let bound = 1.0 / ((cin * 9) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let mut draw = || F::from_f64(dist.sample(rng)).expect("representable");
                Layer {
                    weight: Array2::from_shape_simple_fn((cout, cin * 9), &mut draw),
                    bias: Array1::from_shape_simple_fn(cout, &mut draw),
                    gamma: Array1::ones(cout),
                    beta: Array1::zeros(cout),
                    relu,
                    affine: relu,
                    velocity: None,
                }
            })
            .collect();
        Self {
            height,
            width,
            layers,
            caches: Vec::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.gamma.len())
    }

    /// `input` is `(channels, height * width)`; returns `(out_channels, pixels)`.
    pub fn forward(&mut self, input: &Array2<F>) -> Array2<F> {
        self.caches.clear();
        let mut x = input.clone();
        for layer in &self.layers {
            let cols = im2col(&x, self.height, self.width);
            let mut act = layer.weight.dot(&cols);
            act += &layer.bias.view().insert_axis(Axis(1));
            if layer.relu {
                act.mapv_inplace(|v| v.max(F::zero()));
            }
            let n = F::from_usize(act.ncols()).expect("representable");
            let mean = act.sum_axis(Axis(1)) / n;
            let centered = &act - &mean.view().insert_axis(Axis(1));
            let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
            let eps = F::from_f64(1e-5).expect("representable");
            let inv_std = var.mapv(|v| (v + eps).sqrt().recip());
            let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
            x = &xhat * &layer.gamma.view().insert_axis(Axis(1)) + &layer.beta.view().insert_axis(Axis(1));
            self.caches.push(Cache {
                cols,
                act,
                xhat,
                inv_std,
            });
        }
        x
    }

    /// Backpropagates `grad_out` (same shape as the last output) and applies
    /// one momentum SGD step.
    pub fn backward_step(&mut self, grad_out: &Array2<F>, lr: F, momentum: F) {
        let grads = self.backward(grad_out);
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            let v = match layer.velocity.take() {
                None => g,
                Some(mut v) => {
                    v.weight = v.weight * momentum + &g.weight;
                    v.bias = v.bias * momentum + &g.bias;
                    v.gamma = v.gamma * momentum + &g.gamma;
                    v.beta = v.beta * momentum + &g.beta;
                    v
                }
            };
            layer.weight.scaled_add(-lr, &v.weight);
            layer.bias.scaled_add(-lr, &v.bias);
            if layer.affine {
                layer.gamma.scaled_add(-lr, &v.gamma);
                layer.beta.scaled_add(-lr, &v.beta);
            }
            layer.velocity = Some(v);
        }
    }

    fn backward(&self, grad_out: &Array2<F>) -> Vec<Grads<F>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dy = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&self.caches).enumerate().rev() {
            let n = F::from_usize(dy.ncols()).expect("representable");
            let d_gamma = (&dy * &cache.xhat).sum_axis(Axis(1));
            let d_beta = dy.sum_axis(Axis(1));
            let dxhat = &dy * &layer.gamma.view().insert_axis(Axis(1));
            let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
            let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut dact = (&dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat)
                * &(&cache.inv_std / n).view().insert_axis(Axis(1));
            if layer.relu {
                ndarray::Zip::from(&mut dact).and(&cache.act).for_each(|d, &a| {
                    if a <= F::zero() {
                        *d = F::zero();
                    }
                });
            }
            let d_weight = dact.dot(&cache.cols.t());
            let d_bias = dact.sum_axis(Axis(1));
            if i > 0 {
                let dcols = layer.weight.t().dot(&dact);
                dy = col2im(&dcols, layer.weight.ncols() / 9, self.height, self.width);
            }
            grads.push(Grads {
                weight: d_weight,
                bias: d_bias,
                gamma: d_gamma,
                beta: d_beta,
            });
        }
        grads.reverse();
        grads
    }
}

fn im2col<F: NdFloat>(x: &Array2<F>, h: usize, w: usize) -> Array2<F> {
    let cin = x.nrows();
    let mut cols = Array2::zeros((cin * 9, h * w));
    for ci in 0..cin {
        let src = x.row(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut dst = cols.row_mut(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + xx] = src[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: NdFloat>(cols: &Array2<F>, cin: usize, h: usize, w: usize) -> Array2<F> {
    let mut x = Array2::zeros((cin, h * w));
    for ci in 0..cin {
        let mut dst = x.row_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sy as usize * w + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand_distr::StandardNormal;

    fn objective(out: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (out * probe).sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = seed::rng(5);
        let (h, w) = (4, 5);
        let mut net = LabelNet::<f64>::new(h, w, 2, 3, 3, &mut rng);
        let input = Array2::from_shape_simple_fn((2, h * w), || rng.sample::<f64, _>(StandardNormal));
        let probe = Array2::from_shape_simple_fn((3, h * w), || rng.sample::<f64, _>(StandardNormal));
        net.forward(&input);
        let grads = net.backward(&probe);
        let eps = 1e-6;
        for layer in 0..3 {
            for idx in [0usize, 4, 9] {
                let (r, c) = (idx % net.layers[layer].weight.nrows(), idx % net.layers[layer].weight.ncols());
                let orig = net.layers[layer].weight[[r, c]];
                net.layers[layer].weight[[r, c]] = orig + eps;
                let plus = objective(&net.forward(&input), &probe);
                net.layers[layer].weight[[r, c]] = orig - eps;
                let minus = objective(&net.forward(&input), &probe);
                net.layers[layer].weight[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads[layer].weight[[r, c]];
                assert!(
                    (numeric - analytic).abs() <= 1e-5 * numeric.abs().max(analytic.abs()).max(1e-3),
                    "layer {layer} w[{r},{c}]: {analytic} vs {numeric}"
                );
            }
            let k = 1 % net.layers[layer].gamma.len();
            let orig = net.layers[layer].gamma[k];
            net.layers[layer].gamma[k] = orig + eps;
            let plus = objective(&net.forward(&input), &probe);
            net.layers[layer].gamma[k] = orig - eps;
            let minus = objective(&net.forward(&input), &probe);
            net.layers[layer].gamma[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            assert!((numeric - grads[layer].gamma[k]).abs() < 1e-5 * numeric.abs().max(1e-3));
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let mut rng = seed::rng(1);
        let (h, w, c) = (3, 4, 2);
        let x = Array2::from_shape_simple_fn((c, h * w), || rng.sample::<f64, _>(StandardNormal));
        let y = Array2::from_shape_simple_fn((c * 9, h * w), || rng.sample::<f64, _>(StandardNormal));
        let lhs = (&im2col(&x, h, w) * &y).sum();
        let rhs = (&x * &col2im(&y, c, h, w)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
