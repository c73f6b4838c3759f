//! Minimal neural-network layers with explicit backward passes.
//!
//! The segmentation network is small and fixed in topology, so rather than a
//! general autodiff graph each layer implements its own forward/backward
//! pair. Everything is generic over the float type: production code runs at
//! `f32`, gradient checks instantiate the same layers at `f64`.

pub mod conv;
pub mod norm;
pub mod optim;

use ndarray::{Array5, NdFloat};
use num_traits::FromPrimitive;

/// Float element type of network tensors.
pub trait Elem: NdFloat + FromPrimitive + std::iter::Sum {
    const EPS_NORM: f64 = 1e-5;
}
impl Elem for f32 {}
impl Elem for f64 {}

/// Activations and network IO use `(batch, channel, z, y, x)` tensors.
pub type Tensor<F> = Array5<F>;

pub(crate) fn fl<F: Elem>(x: f64) -> F {
    F::from_f64(x).expect("f64 conversion")
}

/// Leaky rectifier with the given negative slope.
pub fn leaky_relu<F: Elem>(x: &Tensor<F>, slope: f64) -> Tensor<F> {
    let a = fl::<F>(slope);
    x.mapv(|v| if v >= F::zero() { v } else { a * v })
}

/// Backward of [`leaky_relu`] given the layer input.
pub fn leaky_relu_backward<F: Elem>(x: &Tensor<F>, grad_out: &Tensor<F>, slope: f64) -> Tensor<F> {
    let a = fl::<F>(slope);
    ndarray::Zip::from(x)
        .and(grad_out)
        .map_collect(|&xv, &gv| if xv >= F::zero() { gv } else { a * gv })
}

/// Numerically stable softmax over the channel axis.
pub fn softmax<F: Elem>(logits: &Tensor<F>) -> Tensor<F> {
    let (n, c, d, h, w) = logits.dim();
    let mut out = logits.clone();
    for bi in 0..n {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut m = F::neg_infinity();
                    for ci in 0..c {
                        m = m.max(out[[bi, ci, z, y, x]]);
                    }
                    let mut total = F::zero();
                    for ci in 0..c {
                        let e = (out[[bi, ci, z, y, x]] - m).exp();
                        out[[bi, ci, z, y, x]] = e;
                        total = total + e;
                    }
                    for ci in 0..c {
                        out[[bi, ci, z, y, x]] = out[[bi, ci, z, y, x]] / total;
                    }
                }
            }
        }
    }
    out
}

/// Maps a gradient w.r.t. softmax probabilities back to logits:
/// `dz_i = p_i * (g_i - sum_j g_j p_j)` per voxel.
pub fn softmax_backward<F: Elem>(probs: &Tensor<F>, grad_probs: &Tensor<F>) -> Tensor<F> {
    let (n, c, d, h, w) = probs.dim();
    let mut out = Tensor::<F>::zeros((n, c, d, h, w));
    for bi in 0..n {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut dot = F::zero();
                    for ci in 0..c {
                        dot = dot + grad_probs[[bi, ci, z, y, x]] * probs[[bi, ci, z, y, x]];
                    }
                    for ci in 0..c {
                        out[[bi, ci, z, y, x]] =
                            probs[[bi, ci, z, y, x]] * (grad_probs[[bi, ci, z, y, x]] - dot);
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbor 2x upsampling along the three spatial axes.
pub fn upsample_nearest2<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, d, h, w) = x.dim();
    Tensor::from_shape_fn((n, c, 2 * d, 2 * h, 2 * w), |(bi, ci, z, y, xx)| {
        x[[bi, ci, z / 2, y / 2, xx / 2]]
    })
}

/// Backward of [`upsample_nearest2`]: sums gradients over each 2x2x2 block.
pub fn upsample_nearest2_backward<F: Elem>(grad_out: &Tensor<F>) -> Tensor<F> {
    let (n, c, d2, h2, w2) = grad_out.dim();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut out = Tensor::<F>::zeros((n, c, d, h, w));
    for bi in 0..n {
        for ci in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    for x in 0..w2 {
                        out[[bi, ci, z / 2, y / 2, x / 2]] =
                            out[[bi, ci, z / 2, y / 2, x / 2]] + grad_out[[bi, ci, z, y, x]];
                    }
                }
            }
        }
    }
    out
}

/// Mutable view of one parameter tensor and its gradient accumulator.
pub struct ParamView<'a, F> {
    /// Hierarchical name, e.g. `enc0.conv1.weight`.
    pub name: String,
    /// True for normalization-layer affine parameters.
    pub is_norm: bool,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
}
