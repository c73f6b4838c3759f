//! 3D convolution via im2col and matrix multiplication.

use ndarray::{Array1, Array2, Array5, ShapeBuilder};

use super::{fl, Elem, ParamView, Tensor};
use crate::rng::Rng;
use rand_distr::{Distribution, Normal};

/// k^3 convolution with zero padding `k/2` and configurable stride.
#[derive(Debug, Clone)]
pub struct Conv3d<F: Elem> {
    pub weight: Array5<F>, // (c_out, c_in, k, k, k)
    pub bias: Array1<F>,
    pub stride: usize,
    pub grad_weight: Array5<F>,
    pub grad_bias: Array1<F>,
}

impl<F: Elem> Conv3d<F> {
    /// Kaiming fan-in scaled Gaussian init, zero bias.
    pub fn init(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight =
            Array5::from_shape_fn((c_out, c_in, k, k, k), |_| fl::<F>(normal.sample(rng)));
        Self {
            bias: Array1::zeros(c_out),
            grad_weight: Array5::zeros(weight.raw_dim()),
            grad_bias: Array1::zeros(c_out),
            weight,
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_spatial(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let k = self.kernel();
        let p = k / 2;
        let s = self.stride;
        (
            (d + 2 * p - k) / s + 1,
            (h + 2 * p - k) / s + 1,
            (w + 2 * p - k) / s + 1,
        )
    }

    /// Unfolds one batch item into a `(c_in * k^3, out_voxels)` matrix.
    fn im2col(&self, x: &Tensor<F>, item: usize) -> Array2<F> {
        let (_, c_in, d, h, w) = x.dim();
        let k = self.kernel();
        let p = (k / 2) as isize;
        let s = self.stride;
        let (od, oh, ow) = self.out_spatial(d, h, w);
        let rows = c_in * k * k * k;
        let cols = od * oh * ow;
        // Column-major fill order matches the (row, col) nested loop below.
        let mut out = Array2::<F>::zeros((rows, cols).f());
        let mut col = 0usize;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let bz = (oz * s) as isize - p;
                    let by = (oy * s) as isize - p;
                    let bx = (ox * s) as isize - p;
                    let mut row = 0usize;
                    for ci in 0..c_in {
                        for kz in 0..k {
                            let z = bz + kz as isize;
                            for ky in 0..k {
                                let y = by + ky as isize;
                                for kx in 0..k {
                                    let xx = bx + kx as isize;
                                    let v = if z >= 0
                                        && y >= 0
                                        && xx >= 0
                                        && (z as usize) < d
                                        && (y as usize) < h
                                        && (xx as usize) < w
                                    {
                                        x[[item, ci, z as usize, y as usize, xx as usize]]
                                    } else {
                                        F::zero()
                                    };
                                    out[[row, col]] = v;
                                    row += 1;
                                }
                            }
                        }
                    }
                    col += 1;
                }
            }
        }
        out
    }

    /// Scatters a `(c_in * k^3, out_voxels)` gradient matrix back onto the
    /// input gradient of one batch item (exact transpose of [`Self::im2col`]).
    fn col2im(&self, cols: &Array2<F>, grad_x: &mut Tensor<F>, item: usize) {
        let (_, c_in, d, h, w) = grad_x.dim();
        let k = self.kernel();
        let p = (k / 2) as isize;
        let s = self.stride;
        let (od, oh, ow) = self.out_spatial(d, h, w);
        let mut col = 0usize;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let bz = (oz * s) as isize - p;
                    let by = (oy * s) as isize - p;
                    let bx = (ox * s) as isize - p;
                    let mut row = 0usize;
                    for ci in 0..c_in {
                        for kz in 0..k {
                            let z = bz + kz as isize;
                            for ky in 0..k {
                                let y = by + ky as isize;
                                for kx in 0..k {
                                    let xx = bx + kx as isize;
                                    if z >= 0
                                        && y >= 0
                                        && xx >= 0
                                        && (z as usize) < d
                                        && (y as usize) < h
                                        && (xx as usize) < w
                                    {
                                        grad_x[[item, ci, z as usize, y as usize, xx as usize]] =
                                            grad_x[[item, ci, z as usize, y as usize, xx as usize]]
                                                + cols[[row, col]];
                                    }
                                    row += 1;
                                }
                            }
                        }
                    }
                    col += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let (n, _, d, h, w) = x.dim();
        let (c_out, c_in, k, _, _) = self.weight.dim();
        let (od, oh, ow) = self.out_spatial(d, h, w);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * k * k * k))
            .unwrap();
        let mut out = Tensor::<F>::zeros((n, c_out, od, oh, ow));
        for item in 0..n {
            let cols = self.im2col(x, item);
            let prod = w_mat.dot(&cols); // (c_out, out_voxels)
            for co in 0..c_out {
                let b = self.bias[co];
                let mut l = 0usize;
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out[[item, co, z, y, xx]] = prod[[co, l]] + b;
                            l += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `x` is the forward input (im2col is recomputed rather than cached).
    pub fn backward(&mut self, x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let (n, _, d, h, w) = x.dim();
        let (c_out, c_in, k, _, _) = self.weight.dim();
        let (od, oh, ow) = self.out_spatial(d, h, w);
        let l_total = od * oh * ow;
        let mut grad_x = Tensor::<F>::zeros(x.raw_dim());
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * k * k * k))
            .unwrap();
        let mut gw_mat = Array2::<F>::zeros((c_out, c_in * k * k * k));
        for item in 0..n {
            let cols = self.im2col(x, item);
            let mut go = Array2::<F>::zeros((c_out, l_total));
            for co in 0..c_out {
                let mut l = 0usize;
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let g = grad_out[[item, co, z, y, xx]];
                            go[[co, l]] = g;
                            self.grad_bias[co] = self.grad_bias[co] + g;
                            l += 1;
                        }
                    }
                }
            }
            gw_mat = gw_mat + go.dot(&cols.t());
            let dcols = w_mat.t().dot(&go);
            self.col2im(&dcols, &mut grad_x, item);
        }
        let gw = gw_mat
            .into_shape_with_order((c_out, c_in, k, k, k))
            .unwrap();
        self.grad_weight = &self.grad_weight + &gw;
        grad_x
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(F::zero());
        self.grad_bias.fill(F::zero());
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, F>)) {
        f(ParamView {
            name: format!("{prefix}.weight"),
            is_norm: false,
            value: self.weight.as_slice_mut().unwrap(),
            grad: self.grad_weight.as_slice_mut().unwrap(),
        });
        f(ParamView {
            name: format!("{prefix}.bias"),
            is_norm: false,
            value: self.bias.as_slice_mut().unwrap(),
            grad: self.grad_bias.as_slice_mut().unwrap(),
        });
    }
}
