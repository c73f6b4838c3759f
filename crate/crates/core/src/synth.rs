//! Deterministic paired cross-domain phantom generator.
//!
//! Every sample index gets one label geometry (random superellipsoid blobs,
//! non-overlapping by construction) rendered under two divergent intensity
//! domains. The domain gap is intensity-only by default, which isolates the
//! kind of shift the adaptation method targets; an optional resolution gap
//! renders domain B at doubled voxel size.

use ndarray::Array3;
use rand::Rng as _;

use crate::error::{CoreError, Result};
use crate::rng::{derive_rng, Rng};
use crate::volume::{resample, resample_labels, Dataset, LabelMap, Volume};

/// How a domain distorts the shared class base intensities.
#[derive(Debug, Clone, PartialEq)]
pub enum IntensityTransfer {
    Identity,
    /// Reverses the intensity rank order of the classes.
    Inverted,
    /// Power-law remap of the normalized intensity.
    Gamma(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityDomain {
    /// Base intensity per class (index = class id), values in [0, 1].
    pub class_intensity_map: Vec<f32>,
    pub intensity_transfer: IntensityTransfer,
    pub noise_sigma: f32,
    /// Peak relative amplitude of the multiplicative smooth bias field.
    pub bias_field_strength: f32,
}

impl IntensityDomain {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_intensity_map.len() != num_classes {
            return Err(CoreError::Config(format!(
                "class_intensity_map has {} entries for {num_classes} classes",
                self.class_intensity_map.len()
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.bias_field_strength) {
            return Err(CoreError::Config("bias_field_strength must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Intensity values are clipped to this range after rendering.
pub const INTENSITY_RANGE: (f32, f32) = (0.0, 2.0);

/// Foreground class volume fraction bounds enforced per sample.
pub const CLASS_FRACTION_BOUNDS: (f64, f64) = (0.005, 0.10);

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub grid_size: usize,
    /// Background plus foreground organs.
    pub num_classes: usize,
    pub shapes_per_class: usize,
    pub num_samples: usize,
    pub spacing_mm: f64,
    pub domain_a: IntensityDomain,
    pub domain_b: IntensityDomain,
    /// Render domain B at doubled voxel size.
    pub resolution_gap: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            num_classes: 4,
            shapes_per_class: 1,
            num_samples: 50,
            spacing_mm: 1.5,
            domain_a: IntensityDomain {
                class_intensity_map: vec![0.15, 0.45, 0.70, 0.95],
                intensity_transfer: IntensityTransfer::Identity,
                noise_sigma: 0.02,
                bias_field_strength: 0.1,
            },
            domain_b: IntensityDomain {
                class_intensity_map: vec![0.15, 0.45, 0.70, 0.95],
                intensity_transfer: IntensityTransfer::Inverted,
                noise_sigma: 0.03,
                bias_field_strength: 0.2,
            },
            resolution_gap: false,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 32 {
            return Err(CoreError::Config("grid_size must be >= 32".into()));
        }
        if self.num_classes < 2 {
            return Err(CoreError::Config("num_classes must be >= 2".into()));
        }
        if self.shapes_per_class == 0 || self.num_samples == 0 {
            return Err(CoreError::Config(
                "shapes_per_class and num_samples must be positive".into(),
            ));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(CoreError::Config("spacing_mm must be positive".into()));
        }
        self.domain_a.validate(self.num_classes)?;
        self.domain_b.validate(self.num_classes)
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    exponent: f64,
}

impl Blob {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let t = |v: f64, c: f64, r: f64| ((v - c) / r).abs().powf(self.exponent);
        t(z, self.center[0], self.radii[0])
            + t(y, self.center[1], self.radii[1])
            + t(x, self.center[2], self.radii[2])
            <= 1.0
    }
}

const MAX_RETRIES: usize = 60;

/// Draws non-overlapping blob labels for one sample.
fn sample_labels(cfg: &PhantomConfig, sample: usize, rng: &mut Rng) -> Result<Array3<u8>> {
    let n = cfg.grid_size;
    let mut labels = Array3::<u8>::zeros((n, n, n));
    let total = (n * n * n) as f64;

    for class in 1..cfg.num_classes {
        let mut placed = false;
        'retry: for _attempt in 0..MAX_RETRIES {
            // Propose the blobs of this class.
            let mut blobs = Vec::with_capacity(cfg.shapes_per_class);
            for _ in 0..cfg.shapes_per_class {
                let r = |rng: &mut Rng| rng.gen_range(0.11..0.20) * n as f64;
                let radii = [r(rng), r(rng), r(rng)];
                let c = |rng: &mut Rng, rad: f64| rng.gen_range(rad + 1.0..n as f64 - rad - 1.0);
                let center = [
                    c(rng, radii[0]),
                    c(rng, radii[1]),
                    c(rng, radii[2]),
                ];
                blobs.push(Blob {
                    center,
                    radii,
                    exponent: rng.gen_range(1.5..3.5),
                });
            }
            // Render into a scratch mask; reject overlaps with earlier classes.
            let mut voxels = Vec::new();
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        if blobs
                            .iter()
                            .any(|b| b.contains(z as f64, y as f64, x as f64))
                        {
                            if labels[[z, y, x]] != 0 {
                                continue 'retry;
                            }
                            voxels.push([z, y, x]);
                        }
                    }
                }
            }
            let fraction = voxels.len() as f64 / total;
            if !(CLASS_FRACTION_BOUNDS.0..=CLASS_FRACTION_BOUNDS.1).contains(&fraction) {
                continue 'retry;
            }
            for v in voxels {
                labels[[v[0], v[1], v[2]]] = class as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(CoreError::Generation(format!(
                "sample {sample}: could not place class {class} without overlap after {MAX_RETRIES} retries"
            )));
        }
    }
    Ok(labels)
}

/// Smooth multiplicative bias field: trilinear interpolation of a coarse
/// random grid, scaled to `1 +/- strength`.
fn bias_field(n: usize, strength: f32, rng: &mut Rng) -> Array3<f32> {
    if strength == 0.0 {
        return Array3::ones((n, n, n));
    }
    let coarse = 4usize;
    let grid = Array3::from_shape_fn((coarse, coarse, coarse), |_| rng.gen_range(-1.0f32..1.0));
    let scale = (coarse - 1) as f64 / (n - 1) as f64;
    Array3::from_shape_fn((n, n, n), |(z, y, x)| {
        let v = crate::volume::sample_trilinear_clamped(
            &grid.view(),
            z as f64 * scale,
            y as f64 * scale,
            x as f64 * scale,
        );
        1.0 + strength * v
    })
}

fn render_domain(
    labels: &Array3<u8>,
    domain: &IntensityDomain,
    spacing: f64,
    rng: &mut Rng,
) -> Result<Volume> {
    let n = labels.dim().0;
    let map = &domain.class_intensity_map;
    let lo = map.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = map.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let transfer = |v: f32| -> f32 {
        match &domain.intensity_transfer {
            IntensityTransfer::Identity => v,
            IntensityTransfer::Inverted => lo + hi - v,
            IntensityTransfer::Gamma(g) => {
                let span = (hi - lo).max(1e-6);
                let t = ((v - lo) / span).clamp(0.0, 1.0);
                lo + span * (t as f64).powf(*g) as f32
            }
        }
    };
    let bias = bias_field(n, domain.bias_field_strength, rng);
    let mut data = Array3::<f32>::zeros((n, n, n));
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let base = transfer(map[labels[[z, y, x]] as usize]);
                let mut v = base * bias[[z, y, x]];
                if domain.noise_sigma > 0.0 {
                    // Box-Muller on two uniform draws.
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    v += domain.noise_sigma * g as f32;
                }
                data[[z, y, x]] = v.clamp(INTENSITY_RANGE.0, INTENSITY_RANGE.1);
            }
        }
    }
    Volume::from_scalar(data, [spacing; 3])
}

/// Generates the paired benchmark: the same label geometry per sample index,
/// rendered under both intensity domains.
pub fn generate(cfg: &PhantomConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut samples_a = Vec::with_capacity(cfg.num_samples);
    let mut samples_b = Vec::with_capacity(cfg.num_samples);
    for sample in 0..cfg.num_samples {
        let mut geo_rng = derive_rng(cfg.seed, &[21, sample as u64]);
        let labels = sample_labels(cfg, sample, &mut geo_rng)?;
        let label_map = LabelMap::new(labels.clone(), cfg.num_classes, [cfg.spacing_mm; 3])?;

        let mut rng_a = derive_rng(cfg.seed, &[22, sample as u64]);
        let vol_a = render_domain(&labels, &cfg.domain_a, cfg.spacing_mm, &mut rng_a)?;
        samples_a.push((vol_a, Some(label_map.clone())));

        let mut rng_b = derive_rng(cfg.seed, &[23, sample as u64]);
        let vol_b = render_domain(&labels, &cfg.domain_b, cfg.spacing_mm, &mut rng_b)?;
        if cfg.resolution_gap {
            let coarse = [cfg.spacing_mm * 2.0; 3];
            samples_b.push((
                resample(&vol_b, coarse)?,
                Some(resample_labels(&label_map, coarse)?),
            ));
        } else {
            samples_b.push((vol_b, Some(label_map)));
        }
    }
    Ok((
        Dataset::new(samples_a, "domain_a")?,
        Dataset::new(samples_b, "domain_b")?,
    ))
}
