//! Invertible affine spatial augmentation with sentinel-based consistency
//! masking.
//!
//! A warp resamples trilinearly through an affine transform expressed in
//! centered voxel coordinates; sample points that leave the input grid are
//! filled with the reserved sentinel. Because interpolation blends values,
//! testing a round-tripped volume against the sentinel directly is
//! ill-defined; every warp therefore also transports an all-ones validity
//! channel (fill 0), and the consistency mask thresholds the round-tripped
//! indicator.

use ndarray::{Array3, Array4};
use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::volume::Volume;

/// Sampling ranges for [`sample_affine`] plus the sentinel semantics shared
/// by all warps of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConfig {
    pub max_rotation_deg: f64,
    pub max_scale_delta: f64,
    pub max_translation_vox: f64,
    pub validity_threshold: f64,
    pub sentinel: f32,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            max_scale_delta: 0.1,
            max_translation_vox: 5.0,
            validity_threshold: 0.999,
            sentinel: -1.0,
        }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rotation_deg < 0.0 || self.max_scale_delta < 0.0 || self.max_translation_vox < 0.0 {
            return Err(CoreError::invalid("spatial ranges must be non-negative"));
        }
        if self.max_scale_delta >= 1.0 {
            return Err(CoreError::invalid("max_scale_delta must be < 1"));
        }
        if !(0.0 < self.validity_threshold && self.validity_threshold < 1.0) {
            return Err(CoreError::invalid("validity_threshold must be in (0, 1)"));
        }
        if (0.0..=1.0).contains(&(self.sentinel as f64)) {
            return Err(CoreError::invalid(
                "sentinel must lie outside [0, 1] so it cannot collide with probabilities",
            ));
        }
        Ok(())
    }
}

/// Invertible affine voxel-coordinate transform with sentinel-fill semantics.
///
/// The transform is stored as a pull-back in coordinates centered on the
/// grid: an output voxel at centered position `p` samples the input at
/// `linear * p + translation`. Composition about the center makes the
/// transform independent of the patch extent.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAugmentation {
    linear: [[f64; 3]; 3],
    translation: [f64; 3],
    pub sentinel: f32,
    pub validity_threshold: f64,
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl AffineAugmentation {
    pub fn new(
        linear: [[f64; 3]; 3],
        translation: [f64; 3],
        sentinel: f32,
        validity_threshold: f64,
    ) -> Result<Self> {
        if det3(&linear).abs() <= 1e-8 {
            return Err(CoreError::invalid("affine matrix is singular"));
        }
        Ok(Self {
            linear,
            translation,
            sentinel,
            validity_threshold,
        })
    }

    pub fn identity(cfg: &SpatialConfig) -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            sentinel: cfg.sentinel,
            validity_threshold: cfg.validity_threshold,
        }
    }

    /// Homogeneous 4x4 representation in `(z, y, x, 1)` order.
    pub fn matrix4(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&self.linear[i]);
            m[i][3] = self.translation[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.linear)
    }

    /// The inverse transform (same sentinel semantics).
    pub fn inverse(&self) -> Result<Self> {
        let d = det3(&self.linear);
        if d.abs() <= 1e-8 {
            return Err(CoreError::invalid("affine matrix is singular"));
        }
        let m = &self.linear;
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d,
            ],
        ];
        // q = A p + t  =>  p = A^-1 q - A^-1 t
        let mut t = [0.0; 3];
        for i in 0..3 {
            t[i] = -(0..3).map(|k| inv[i][k] * self.translation[k]).sum::<f64>();
        }
        Ok(Self {
            linear: inv,
            translation: t,
            sentinel: self.sentinel,
            validity_threshold: self.validity_threshold,
        })
    }
}

/// Draws a random affine: per-axis rotations within `±max_rotation_deg`,
/// per-axis scales within `1 ± max_scale_delta`, translations within
/// `±max_translation_vox`, composed about the patch center.
pub fn sample_affine(cfg: &SpatialConfig, rng: &mut Rng) -> Result<AffineAugmentation> {
    cfg.validate()?;
    let r = cfg.max_rotation_deg.to_radians();
    let draw = |rng: &mut Rng, half: f64| {
        if half == 0.0 {
            0.0
        } else {
            rng.gen_range(-half..half)
        }
    };
    let (az, ay, ax) = (draw(rng, r), draw(rng, r), draw(rng, r));
    let s = cfg.max_scale_delta;
    let scale: [f64; 3] = if s == 0.0 {
        [1.0; 3]
    } else {
        [
            rng.gen_range(1.0 - s..1.0 + s),
            rng.gen_range(1.0 - s..1.0 + s),
            rng.gen_range(1.0 - s..1.0 + s),
        ]
    };
    let t = cfg.max_translation_vox;
    let translation = [draw(rng, t), draw(rng, t), draw(rng, t)];

    // Rotations about the z, y, x index axes; axes here are (z, y, x).
    let (cz, sz) = (az.cos(), az.sin());
    let (cy, sy) = (ay.cos(), ay.sin());
    let (cx, sx) = (ax.cos(), ax.sin());
    let rot_z = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
    let rot_y = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rot_x = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
    let rot = matmul3(&rot_z, &matmul3(&rot_y, &rot_x));
    let mut linear = rot;
    for row in linear.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= scale[j];
        }
    }
    AffineAugmentation::new(linear, translation, cfg.sentinel, cfg.validity_threshold)
}

/// Per-voxel trilinear sampling plan for one transform and grid shape.
///
/// The same plan applies to every channel, and its transpose (scatter with
/// identical weights) is the exact adjoint used for backpropagation.
pub struct WarpPlan {
    shape: [usize; 3],
    /// For each output voxel: `Some((base_index, fractions))` when the sample
    /// point lies inside the grid, `None` when it is out of field.
    samples: Vec<Option<([usize; 3], [f64; 3])>>,
}

impl WarpPlan {
    /// Builds the plan for warping a `shape`-sized grid through `t`.
    pub fn build(t: &AffineAugmentation, shape: [usize; 3]) -> Self {
        let center = [
            (shape[0] as f64 - 1.0) / 2.0,
            (shape[1] as f64 - 1.0) / 2.0,
            (shape[2] as f64 - 1.0) / 2.0,
        ];
        let mut samples = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let p = [
                        z as f64 - center[0],
                        y as f64 - center[1],
                        x as f64 - center[2],
                    ];
                    let mut q = [0.0f64; 3];
                    for i in 0..3 {
                        q[i] = t.linear[i][0] * p[0]
                            + t.linear[i][1] * p[1]
                            + t.linear[i][2] * p[2]
                            + t.translation[i]
                            + center[i];
                    }
                    let inside = (0..3).all(|i| q[i] >= 0.0 && q[i] <= shape[i] as f64 - 1.0);
                    if !inside {
                        samples.push(None);
                        continue;
                    }
                    let mut base = [0usize; 3];
                    let mut frac = [0.0f64; 3];
                    for i in 0..3 {
                        let f = q[i].floor();
                        // Keep the 8-point stencil in bounds at the top edge.
                        let b = (f as usize).min(shape[i].saturating_sub(2));
                        base[i] = b;
                        frac[i] = q[i] - b as f64;
                    }
                    samples.push(Some((base, frac)));
                }
            }
        }
        Self { shape, samples }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Applies the plan to one scalar field, filling out-of-field voxels.
    pub fn apply(&self, field: &Array3<f32>, fill: f32) -> Array3<f32> {
        let [nz, ny, nx] = self.shape;
        let mut out = Array3::from_elem((nz, ny, nx), fill);
        for (idx, sample) in self.samples.iter().enumerate() {
            let Some((base, frac)) = sample else { continue };
            let z = idx / (ny * nx);
            let y = (idx / nx) % ny;
            let x = idx % nx;
            let mut acc = 0.0f64;
            for (dz, wz) in [(0usize, 1.0 - frac[0]), (1, frac[0])] {
                for (dy, wy) in [(0usize, 1.0 - frac[1]), (1, frac[1])] {
                    for (dx, wx) in [(0usize, 1.0 - frac[2]), (1, frac[2])] {
                        let w = wz * wy * wx;
                        if w == 0.0 {
                            continue;
                        }
                        acc += w * field[[base[0] + dz, base[1] + dy, base[2] + dx]] as f64;
                    }
                }
            }
            out[[z, y, x]] = acc as f32;
        }
        out
    }

    /// Exact adjoint of [`WarpPlan::apply`]: scatters an output-space field
    /// back to input space with the same trilinear weights. Out-of-field
    /// output voxels contribute nothing.
    pub fn scatter_adjoint(&self, grad_out: &Array3<f64>) -> Array3<f64> {
        let [nz, ny, nx] = self.shape;
        let mut out = Array3::<f64>::zeros((nz, ny, nx));
        for (idx, sample) in self.samples.iter().enumerate() {
            let Some((base, frac)) = sample else { continue };
            let z = idx / (ny * nx);
            let y = (idx / nx) % ny;
            let x = idx % nx;
            let g = grad_out[[z, y, x]];
            if g == 0.0 {
                continue;
            }
            for (dz, wz) in [(0usize, 1.0 - frac[0]), (1, frac[0])] {
                for (dy, wy) in [(0usize, 1.0 - frac[1]), (1, frac[1])] {
                    for (dx, wx) in [(0usize, 1.0 - frac[2]), (1, frac[2])] {
                        let w = wz * wy * wx;
                        if w == 0.0 {
                            continue;
                        }
                        out[[base[0] + dz, base[1] + dy, base[2] + dx]] += w * g;
                    }
                }
            }
        }
        out
    }
}

/// A warped volume together with its transported validity indicator
/// (all-ones at the origin of the chain, fill 0 under every warp).
#[derive(Debug, Clone)]
pub struct Warped {
    pub volume: Volume,
    pub validity: Array3<f32>,
}

fn warp_impl(v: &Volume, validity: Option<&Array3<f32>>, t: &AffineAugmentation) -> Result<Warped> {
    let shape = v.shape();
    let plan = WarpPlan::build(t, shape);
    let channels = v.channels();
    let mut out = Array4::<f32>::zeros((channels, shape[0], shape[1], shape[2]));
    for c in 0..channels {
        let warped = plan.apply(&v.channel(c).to_owned(), t.sentinel);
        out.index_axis_mut(ndarray::Axis(0), c).assign(&warped);
    }
    let ones = Array3::<f32>::ones((shape[0], shape[1], shape[2]));
    let validity_in = validity.unwrap_or(&ones);
    let validity_out = plan.apply(validity_in, 0.0);
    Ok(Warped {
        volume: Volume::new(out, v.spacing())?,
        validity: validity_out,
    })
}

/// Warps a volume through `t`; out-of-field voxels are filled with the
/// sentinel and a fresh validity channel is transported alongside.
pub fn warp(v: &Volume, t: &AffineAugmentation) -> Result<Warped> {
    warp_impl(v, None, t)
}

/// Warps through the inverse of `t` (same sentinel semantics).
pub fn inverse_warp(v: &Volume, t: &AffineAugmentation) -> Result<Warped> {
    warp_impl(v, None, &t.inverse()?)
}

/// Continues a warp chain, transporting the existing validity channel.
pub fn warp_chained(w: &Warped, t: &AffineAugmentation) -> Result<Warped> {
    warp_impl(&w.volume, Some(&w.validity), t)
}

/// Continues a warp chain through the inverse of `t`.
pub fn inverse_warp_chained(w: &Warped, t: &AffineAugmentation) -> Result<Warped> {
    warp_impl(&w.volume, Some(&w.validity), &t.inverse()?)
}

/// Consistency mask: true exactly where both operands' transported validity
/// reaches `validity_threshold` (the indicator realization of the sentinel
/// inequality test).
pub fn consistency_mask(a: &Warped, b: &Warped, validity_threshold: f64) -> Result<Array3<bool>> {
    if a.validity.dim() != b.validity.dim() {
        return Err(CoreError::invalid(format!(
            "mask operands disagree on shape: {:?} vs {:?}",
            a.validity.dim(),
            b.validity.dim()
        )));
    }
    let thr = validity_threshold as f32;
    Ok(ndarray::Zip::from(&a.validity)
        .and(&b.validity)
        .map_collect(|&va, &vb| va >= thr && vb >= thr))
}
