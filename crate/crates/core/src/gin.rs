//! Global intensity non-linear (GIN) augmentation.
//!
//! Passes the input through a shallow convolutional network whose weights are
//! freshly sampled on every call and blends the result with the original:
//! `alpha * g(x) + (1 - alpha) * x`.

use ndarray::{Array3, Array4, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::volume::Volume;

/// Parameters of the GIN augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct GinConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    /// Bounds of the uniform law the blend weight is drawn from.
    pub alpha_distribution: (f64, f64),
    /// Rescale the network output to the input's mean/std before blending.
    pub renormalize_output: bool,
    pub seed: u64,
}

impl Default for GinConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_channels: 2,
            kernel_size: 3,
            alpha_distribution: (0.0, 1.0),
            renormalize_output: true,
            seed: 0,
        }
    }
}

impl GinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(CoreError::invalid("num_layers must be >= 1"));
        }
        if self.hidden_channels < 1 {
            return Err(CoreError::invalid("hidden_channels must be >= 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(CoreError::invalid("kernel_size must be odd"));
        }
        let (lo, hi) = self.alpha_distribution;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(CoreError::invalid(format!(
                "alpha_distribution must satisfy 0 <= low <= high <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

const LEAKY_SLOPE: f32 = 0.01;

/// One freshly sampled randomized network: a stack of kernel^3 convolutions
/// with leaky-rectifier nonlinearities between layers.
struct GinNet {
    /// Per layer: weights of shape (c_out, c_in, k, k, k).
    weights: Vec<ndarray::Array5<f32>>,
}

fn sample_net(cfg: &GinConfig, rng: &mut Rng) -> GinNet {
    let k = cfg.kernel_size;
    let mut dims = Vec::with_capacity(cfg.num_layers + 1);
    dims.push(1usize);
    for _ in 1..cfg.num_layers {
        dims.push(cfg.hidden_channels);
    }
    dims.push(1usize);

    let mut weights = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let (c_in, c_out) = (dims[l], dims[l + 1]);
        let fan_in = (c_in * k * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let w = ndarray::Array5::from_shape_fn((c_out, c_in, k, k, k), |_| {
            normal.sample(rng) as f32
        });
        weights.push(w);
    }
    GinNet { weights }
}

/// Direct kernel^3 convolution with edge-clamped borders; shape preserved.
fn conv3d_clamped(input: &Array4<f32>, w: &ndarray::Array5<f32>) -> Array4<f32> {
    let (c_out, c_in, k, _, _) = w.dim();
    let (ci, nz, ny, nx) = input.dim();
    debug_assert_eq!(ci, c_in);
    let half = (k / 2) as i64;
    let mut out = Array4::<f32>::zeros((c_out, nz, ny, nx));
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    for co in 0..c_out {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = 0.0f32;
                    for ci in 0..c_in {
                        for kz in 0..k {
                            let iz = clamp(z as i64 + kz as i64 - half, nz);
                            for ky in 0..k {
                                let iy = clamp(y as i64 + ky as i64 - half, ny);
                                for kx in 0..k {
                                    let ix = clamp(x as i64 + kx as i64 - half, nx);
                                    acc += w[[co, ci, kz, ky, kx]] * input[[ci, iz, iy, ix]];
                                }
                            }
                        }
                    }
                    out[[co, z, y, x]] = acc;
                }
            }
        }
    }
    out
}

fn net_forward(net: &GinNet, x: &Array3<f32>) -> Array3<f32> {
    let mut act = x.clone().insert_axis(Axis(0));
    for (l, w) in net.weights.iter().enumerate() {
        act = conv3d_clamped(&act, w);
        if l + 1 < net.weights.len() {
            act.mapv_inplace(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v });
        }
    }
    act.index_axis(Axis(0), 0).to_owned()
}

fn mean_std(a: &Array3<f32>) -> (f64, f64) {
    let n = a.len() as f64;
    let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = a.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Applies GIN to a single-channel volume, drawing the blend weight and the
/// network weights from `rng` (alpha first, then the weights).
pub fn gin_augment(v: &Volume, cfg: &GinConfig, rng: &mut Rng) -> Result<Volume> {
    cfg.validate()?;
    let field = v.scalar()?.to_owned();

    let (lo, hi) = cfg.alpha_distribution;
    let alpha = if lo == hi { lo } else { rng.gen_range(lo..hi) } as f32;

    let net = sample_net(cfg, rng);
    let mut g = net_forward(&net, &field);

    if cfg.renormalize_output {
        let (mx, sx) = mean_std(&field);
        let (mg, sg) = mean_std(&g);
        if sg > 1e-12 {
            g.mapv_inplace(|v| (((v as f64 - mg) / sg) * sx + mx) as f32);
        } else {
            g.fill(mx as f32);
        }
    }

    let blended =
        ndarray::Zip::from(&g).and(&field).map_collect(|&gv, &xv| alpha * gv + (1.0 - alpha) * xv);
    Volume::from_scalar(blended, v.spacing())
}

/// The raw randomized-network response `g(x)` without blending; used by
/// tests that check the network is genuinely re-sampled between calls.
pub fn gin_network_response(v: &Volume, cfg: &GinConfig, rng: &mut Rng) -> Result<Volume> {
    cfg.validate()?;
    let field = v.scalar()?.to_owned();
    let net = sample_net(cfg, rng);
    Volume::from_scalar(net_forward(&net, &field), v.spacing())
}
