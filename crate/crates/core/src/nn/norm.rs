//! Instance and batch normalization with optional affine parameters.

use ndarray::Array1;

use super::{fl, Elem, ParamView, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Batch,
}

/// Forward behavior of normalization layers.
///
/// Instance norm always normalizes with current-input statistics. Batch norm
/// uses current-batch statistics in `Train` mode (updating the running
/// estimates) and the running estimates in `Infer` mode; adaptation runs in
/// `Train` mode so the running statistics drift toward the target domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct Norm<F: Elem> {
    pub kind: NormKind,
    pub affine: bool,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub grad_gamma: Array1<F>,
    pub grad_beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: f64,
}

/// Per-forward cache required by the backward pass.
pub struct NormCache<F: Elem> {
    normalized: Tensor<F>,
    /// One inverse standard deviation per normalization group.
    inv_std: Vec<F>,
    mode: RunMode,
}

impl<F: Elem> Norm<F> {
    pub fn new(kind: NormKind, channels: usize, affine: bool) -> Self {
        Self {
            kind,
            affine,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: RunMode) -> (Tensor<F>, NormCache<F>) {
        let (n, c, d, h, w) = x.dim();
        let spatial = d * h * w;
        let eps = fl::<F>(F::EPS_NORM);
        let mut normalized = Tensor::<F>::zeros(x.raw_dim());

        let mut inv_std = Vec::new();
        match self.kind {
            NormKind::Instance => {
                // One group per (item, channel) over the spatial voxels.
                inv_std.reserve(n * c);
                for bi in 0..n {
                    for ci in 0..c {
                        let mut mean = F::zero();
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    mean = mean + x[[bi, ci, z, y, xx]];
                                }
                            }
                        }
                        mean = mean / fl::<F>(spatial as f64);
                        let mut var = F::zero();
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    let dv = x[[bi, ci, z, y, xx]] - mean;
                                    var = var + dv * dv;
                                }
                            }
                        }
                        var = var / fl::<F>(spatial as f64);
                        let istd = F::one() / (var + eps).sqrt();
                        inv_std.push(istd);
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    normalized[[bi, ci, z, y, xx]] =
                                        (x[[bi, ci, z, y, xx]] - mean) * istd;
                                }
                            }
                        }
                    }
                }
            }
            NormKind::Batch => {
                // One group per channel over (items, spatial voxels).
                inv_std.reserve(c);
                let count = fl::<F>((n * spatial) as f64);
                for ci in 0..c {
                    let (mean, var) = match mode {
                        RunMode::Train => {
                            let mut mean = F::zero();
                            for bi in 0..n {
                                for z in 0..d {
                                    for y in 0..h {
                                        for xx in 0..w {
                                            mean = mean + x[[bi, ci, z, y, xx]];
                                        }
                                    }
                                }
                            }
                            mean = mean / count;
                            let mut var = F::zero();
                            for bi in 0..n {
                                for z in 0..d {
                                    for y in 0..h {
                                        for xx in 0..w {
                                            let dv = x[[bi, ci, z, y, xx]] - mean;
                                            var = var + dv * dv;
                                        }
                                    }
                                }
                            }
                            var = var / count;
                            let m = fl::<F>(self.momentum);
                            self.running_mean[ci] =
                                (F::one() - m) * self.running_mean[ci] + m * mean;
                            self.running_var[ci] = (F::one() - m) * self.running_var[ci] + m * var;
                            (mean, var)
                        }
                        RunMode::Infer => (self.running_mean[ci], self.running_var[ci]),
                    };
                    let istd = F::one() / (var + eps).sqrt();
                    inv_std.push(istd);
                    for bi in 0..n {
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    normalized[[bi, ci, z, y, xx]] =
                                        (x[[bi, ci, z, y, xx]] - mean) * istd;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut out = normalized.clone();
        if self.affine {
            for bi in 0..n {
                for ci in 0..c {
                    let (g, b) = (self.gamma[ci], self.beta[ci]);
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                out[[bi, ci, z, y, xx]] = g * out[[bi, ci, z, y, xx]] + b;
                            }
                        }
                    }
                }
            }
        }
        (
            out,
            NormCache {
                normalized,
                inv_std,
                mode,
            },
        )
    }

    /// Accumulates affine gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &NormCache<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let (n, c, d, h, w) = grad_out.dim();
        let spatial = d * h * w;

        // d(out)/d(normalized) = gamma; accumulate affine grads first.
        let mut grad_norm = grad_out.clone();
        if self.affine {
            for bi in 0..n {
                for ci in 0..c {
                    let mut gg = F::zero();
                    let mut gb = F::zero();
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let g = grad_out[[bi, ci, z, y, xx]];
                                gg = gg + g * cache.normalized[[bi, ci, z, y, xx]];
                                gb = gb + g;
                                grad_norm[[bi, ci, z, y, xx]] = g * self.gamma[ci];
                            }
                        }
                    }
                    self.grad_gamma[ci] = self.grad_gamma[ci] + gg;
                    self.grad_beta[ci] = self.grad_beta[ci] + gb;
                }
            }
        }

        let mut grad_x = Tensor::<F>::zeros(grad_out.raw_dim());
        match self.kind {
            NormKind::Instance => {
                let count = fl::<F>(spatial as f64);
                for bi in 0..n {
                    for ci in 0..c {
                        let istd = cache.inv_std[bi * c + ci];
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    let g = grad_norm[[bi, ci, z, y, xx]];
                                    sum_g = sum_g + g;
                                    sum_gx = sum_gx + g * cache.normalized[[bi, ci, z, y, xx]];
                                }
                            }
                        }
                        let mean_g = sum_g / count;
                        let mean_gx = sum_gx / count;
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    let g = grad_norm[[bi, ci, z, y, xx]];
                                    let xn = cache.normalized[[bi, ci, z, y, xx]];
                                    grad_x[[bi, ci, z, y, xx]] =
                                        istd * (g - mean_g - xn * mean_gx);
                                }
                            }
                        }
                    }
                }
            }
            NormKind::Batch => match cache.mode {
                RunMode::Train => {
                    let count = fl::<F>((n * spatial) as f64);
                    for ci in 0..c {
                        let istd = cache.inv_std[ci];
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for bi in 0..n {
                            for z in 0..d {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let g = grad_norm[[bi, ci, z, y, xx]];
                                        sum_g = sum_g + g;
                                        sum_gx =
                                            sum_gx + g * cache.normalized[[bi, ci, z, y, xx]];
                                    }
                                }
                            }
                        }
                        let mean_g = sum_g / count;
                        let mean_gx = sum_gx / count;
                        for bi in 0..n {
                            for z in 0..d {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let g = grad_norm[[bi, ci, z, y, xx]];
                                        let xn = cache.normalized[[bi, ci, z, y, xx]];
                                        grad_x[[bi, ci, z, y, xx]] =
                                            istd * (g - mean_g - xn * mean_gx);
                                    }
                                }
                            }
                        }
                    }
                }
                RunMode::Infer => {
                    // Running statistics are constants in inference mode.
                    for ci in 0..c {
                        let istd = cache.inv_std[ci];
                        for bi in 0..n {
                            for z in 0..d {
                                for y in 0..h {
                                    for xx in 0..w {
                                        grad_x[[bi, ci, z, y, xx]] =
                                            grad_norm[[bi, ci, z, y, xx]] * istd;
                                    }
                                }
                            }
                        }
                    }
                }
            },
        }
        grad_x
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(F::zero());
        self.grad_beta.fill(F::zero());
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, F>)) {
        if !self.affine {
            return;
        }
        f(ParamView {
            name: format!("{prefix}.gamma"),
            is_norm: true,
            value: self.gamma.as_slice_mut().unwrap(),
            grad: self.grad_gamma.as_slice_mut().unwrap(),
        });
        f(ParamView {
            name: format!("{prefix}.beta"),
            is_norm: true,
            value: self.beta.as_slice_mut().unwrap(),
            grad: self.grad_beta.as_slice_mut().unwrap(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;

    fn toy_input() -> Tensor<f64> {
        Array5::from_shape_fn((2, 3, 2, 2, 2), |(n, c, z, y, x)| {
            ((n * 31 + c * 17 + z * 7 + y * 3 + x) % 11) as f64 * 0.37 - 1.5
        })
    }

    fn fd_check(kind: NormKind, mode: RunMode) {
        let x = toy_input();
        let wfield = Array5::from_shape_fn(x.raw_dim(), |(n, c, z, y, xx)| {
            ((n + c * 2 + z * 3 + y * 5 + xx * 7) % 9) as f64 * 0.2 - 0.8
        });
        let loss = |norm: &mut Norm<f64>, input: &Tensor<f64>| -> f64 {
            let (out, _) = norm.forward(input, mode);
            out.iter().zip(wfield.iter()).map(|(a, b)| a * b).sum()
        };
        let mut norm = Norm::<f64>::new(kind, 3, true);
        norm.gamma[1] = 1.3;
        norm.beta[2] = -0.4;
        // Fix running stats at something non-trivial for Infer mode.
        norm.running_mean.fill(0.2);
        norm.running_var.fill(1.7);

        let (out, cache) = {
            let mut n2 = norm.clone();
            n2.forward(&x, mode)
        };
        let _ = out;
        let mut n_back = norm.clone();
        let grad_x = n_back.backward(&cache, &wfield);

        let h = 1e-6;
        for idx in [[0, 0, 0, 0, 0], [1, 2, 1, 1, 1], [0, 1, 1, 0, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fp = loss(&mut norm.clone(), &xp);
            let fm = loss(&mut norm.clone(), &xm);
            let fd = (fp - fm) / (2.0 * h);
            let an = grad_x[idx];
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
                "{kind:?} {mode:?} at {idx:?}: fd {fd} vs analytic {an}"
            );
        }
        // gamma gradient check
        let g_an = n_back.grad_gamma[1];
        let mut np = norm.clone();
        np.gamma[1] += h;
        let mut nm = norm.clone();
        nm.gamma[1] -= h;
        let fd = (loss(&mut np, &x) - loss(&mut nm, &x)) / (2.0 * h);
        assert!(
            (fd - g_an).abs() < 1e-5 * (1.0 + fd.abs()),
            "{kind:?} {mode:?} gamma: fd {fd} vs {g_an}"
        );
    }

    #[test]
    fn instance_norm_backward_matches_fd() {
        fd_check(NormKind::Instance, RunMode::Train);
        fd_check(NormKind::Instance, RunMode::Infer);
    }

    #[test]
    fn batch_norm_backward_matches_fd() {
        fd_check(NormKind::Batch, RunMode::Train);
        fd_check(NormKind::Batch, RunMode::Infer);
    }

    #[test]
    fn batch_norm_updates_running_stats_in_train_mode() {
        let x = toy_input();
        let mut norm = Norm::<f64>::new(NormKind::Batch, 3, true);
        let before = norm.running_mean.clone();
        let _ = norm.forward(&x, RunMode::Train);
        assert_ne!(norm.running_mean, before);
        let after = norm.running_mean.clone();
        let _ = norm.forward(&x, RunMode::Infer);
        assert_eq!(norm.running_mean, after, "infer mode must not update stats");
    }

    #[test]
    fn instance_norm_is_batch_independent() {
        let x = toy_input();
        let mut norm = Norm::<f64>::new(NormKind::Instance, 3, true);
        let (full, _) = norm.forward(&x, RunMode::Infer);
        // Same item alone in a batch gives the same output.
        let single = x.slice(ndarray::s![0..1, .., .., .., ..]).to_owned();
        let (alone, _) = norm.forward(&single, RunMode::Infer);
        for (a, b) in alone.iter().zip(full.slice(ndarray::s![0..1, .., .., .., ..]).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_affine_norm_exposes_no_params() {
        let mut norm = Norm::<f64>::new(NormKind::Instance, 3, false);
        let mut count = 0;
        norm.visit_params("n", &mut |_| count += 1);
        assert_eq!(count, 0);
    }
}
