//! Core volumetric data types and resampling.
//!
//! Canonical axis order everywhere is `(channel, z, y, x)`; spacings are
//! given in mm per voxel along `(z, y, x)`.

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{CoreError, Result};

/// Dense 3D scalar (or multi-channel) image with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array4<f32>,
    spacing: [f64; 3],
}

impl Volume {
    /// Builds a volume, validating spacing positivity and value finiteness.
    pub fn new(data: Array4<f32>, spacing: [f64; 3]) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(CoreError::invalid("volume must have at least 1 channel"));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::invalid(format!(
                "spacing components must be strictly positive, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(
                "volume data contains NaN or Inf".into(),
            ));
        }
        Ok(Self { data, spacing })
    }

    /// Single-channel volume from a 3D array.
    pub fn from_scalar(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        Self::new(data.insert_axis(Axis(0)), spacing)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial shape `(z, y, x)`.
    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// View of one channel.
    pub fn channel(&self, c: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), c)
    }

    /// The sole channel of a single-channel volume.
    pub fn scalar(&self) -> Result<ArrayView3<'_, f32>> {
        if self.channels() != 1 {
            return Err(CoreError::invalid(format!(
                "expected single-channel volume, got {} channels",
                self.channels()
            )));
        }
        Ok(self.channel(0))
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in self.data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Axis-aligned crop; the window must lie inside the volume.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        let shape = self.shape();
        for a in 0..3 {
            if origin[a] + size[a] > shape[a] || size[a] == 0 {
                return Err(CoreError::invalid(format!(
                    "crop {origin:?}+{size:?} exceeds volume shape {shape:?}"
                )));
            }
        }
        let view = self.data.slice(ndarray::s![
            ..,
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ]);
        Ok(Volume {
            data: view.to_owned(),
            spacing: self.spacing,
        })
    }

    /// Volume-wide z-normalization over all channels; constant volumes map
    /// to all zeros.
    pub fn znormalize(&self) -> Volume {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let data = if std > 0.0 {
            self.data.mapv(|v| ((v as f64 - mean) / std) as f32)
        } else {
            Array4::zeros(self.data.raw_dim())
        };
        Volume {
            data,
            spacing: self.spacing,
        }
    }
}

/// Integer class-per-voxel grid sharing [`Volume`] geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    labels: Array3<u8>,
    num_classes: usize,
    spacing: [f64; 3],
}

impl LabelMap {
    pub fn new(labels: Array3<u8>, num_classes: usize, spacing: [f64; 3]) -> Result<Self> {
        if num_classes < 1 || num_classes > 256 {
            return Err(CoreError::invalid(format!(
                "num_classes must be in [1, 256], got {num_classes}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::invalid(format!(
                "spacing components must be strictly positive, got {spacing:?}"
            )));
        }
        if let Some(&v) = labels.iter().find(|&&v| v as usize >= num_classes) {
            return Err(CoreError::invalid(format!(
                "label value {v} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
            spacing,
        })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    /// Axis-aligned crop; the window must lie inside the map.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<LabelMap> {
        let shape = self.shape();
        for a in 0..3 {
            if origin[a] + size[a] > shape[a] || size[a] == 0 {
                return Err(CoreError::invalid(format!(
                    "crop {origin:?}+{size:?} exceeds label shape {shape:?}"
                )));
            }
        }
        let view = self.labels.slice(ndarray::s![
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ]);
        Ok(LabelMap {
            labels: view.to_owned(),
            num_classes: self.num_classes,
            spacing: self.spacing,
        })
    }

    /// Checks geometry (shape and spacing) against a paired volume.
    pub fn matches_geometry(&self, v: &Volume) -> bool {
        self.shape() == v.shape() && self.spacing == v.spacing()
    }

    /// Labels rendered as a single-channel float volume (exact for class
    /// indices, which are small integers).
    pub fn to_volume(&self) -> Volume {
        Volume {
            data: self
                .labels
                .mapv(|v| v as f32)
                .insert_axis(Axis(0)),
            spacing: self.spacing,
        }
    }

    /// Inverse of [`LabelMap::to_volume`]; values must round to valid classes.
    pub fn from_volume(v: &Volume, num_classes: usize) -> Result<Self> {
        let field = v.scalar()?;
        let mut labels = Array3::<u8>::zeros(field.raw_dim());
        for (dst, &src) in labels.iter_mut().zip(field.iter()) {
            let r = src.round();
            if r < 0.0 || r as usize >= num_classes || (src - r).abs() > 1e-3 {
                return Err(CoreError::invalid(format!(
                    "value {src} is not a class index below {num_classes}"
                )));
            }
            *dst = r as u8;
        }
        LabelMap::new(labels, num_classes, v.spacing())
    }
}

/// Ordered collection of (image, optional labels) pairs from one domain.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(Volume, Option<LabelMap>)>,
    pub domain_tag: String,
}

impl Dataset {
    pub fn new(samples: Vec<(Volume, Option<LabelMap>)>, domain_tag: impl Into<String>) -> Result<Self> {
        let mut num_classes = None;
        for (vol, lab) in &samples {
            if let Some(lab) = lab {
                if !lab.matches_geometry(vol) {
                    return Err(CoreError::invalid(
                        "label map geometry does not match its paired volume",
                    ));
                }
                match num_classes {
                    None => num_classes = Some(lab.num_classes()),
                    Some(n) if n != lab.num_classes() => {
                        return Err(CoreError::invalid(
                            "labeled samples disagree on num_classes",
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            samples,
            domain_tag: domain_tag.into(),
        })
    }

    /// Shared class count of the labeled samples, if any are labeled.
    pub fn num_classes(&self) -> Option<usize> {
        self.samples
            .iter()
            .find_map(|(_, l)| l.as_ref().map(|l| l.num_classes()))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads `field` at a continuous coordinate with trilinear interpolation and
/// edge-value clamping.
pub(crate) fn sample_trilinear_clamped(field: &ArrayView3<'_, f32>, z: f64, y: f64, x: f64) -> f32 {
    let dims = field.dim();
    let (nz, ny, nx) = (dims.0 as isize, dims.1 as isize, dims.2 as isize);
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;

    let z0 = z.floor();
    let y0 = y.floor();
    let x0 = x.floor();
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let (z0, y0, x0) = (z0 as isize, y0 as isize, x0 as isize);

    let mut acc = 0.0f64;
    for (dz, wz) in [(0isize, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let v = field[[clamp(z0 + dz, nz), clamp(y0 + dy, ny), clamp(x0 + dx, nx)]];
                acc += wz * wy * wx * v as f64;
            }
        }
    }
    acc as f32
}

fn validate_target_spacing(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(CoreError::invalid(format!(
            "target spacing must be strictly positive, got {target:?}"
        )));
    }
    Ok(())
}

/// Output extent for a spacing change, rounded half-up on the scaled extent.
fn scaled_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let extent = shape[a] as f64 * spacing[a] / target[a];
        out[a] = ((extent + 0.5).floor() as usize).max(1);
    }
    out
}

/// Resamples a volume to `target_spacing` with trilinear interpolation.
///
/// Output voxel centers are aligned with input voxel centers via the usual
/// half-voxel convention, so identity spacing reproduces the input exactly.
pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    validate_target_spacing(target_spacing)?;
    let spacing = v.spacing();
    let shape = v.shape();
    let out_shape = scaled_shape(shape, spacing, target_spacing);
    let scale = [
        target_spacing[0] / spacing[0],
        target_spacing[1] / spacing[1],
        target_spacing[2] / spacing[2],
    ];

    let channels = v.channels();
    let mut out = Array4::<f32>::zeros((channels, out_shape[0], out_shape[1], out_shape[2]));
    for c in 0..channels {
        let src = v.channel(c);
        let mut dst = out.index_axis_mut(Axis(0), c);
        for iz in 0..out_shape[0] {
            let z = (iz as f64 + 0.5) * scale[0] - 0.5;
            for iy in 0..out_shape[1] {
                let y = (iy as f64 + 0.5) * scale[1] - 0.5;
                for ix in 0..out_shape[2] {
                    let x = (ix as f64 + 0.5) * scale[2] - 0.5;
                    dst[[iz, iy, ix]] = sample_trilinear_clamped(&src, z, y, x);
                }
            }
        }
    }
    Volume::new(out, target_spacing)
}

/// Nearest-neighbor companion to [`resample`] for label maps.
pub fn resample_labels(l: &LabelMap, target_spacing: [f64; 3]) -> Result<LabelMap> {
    validate_target_spacing(target_spacing)?;
    let spacing = l.spacing();
    let shape = l.shape();
    let out_shape = scaled_shape(shape, spacing, target_spacing);
    let scale = [
        target_spacing[0] / spacing[0],
        target_spacing[1] / spacing[1],
        target_spacing[2] / spacing[2],
    ];

    let src = l.labels();
    let mut out = Array3::<u8>::zeros((out_shape[0], out_shape[1], out_shape[2]));
    let nearest = |p: f64, n: usize| ((p + 0.5).floor() as isize).clamp(0, n as isize - 1) as usize;
    for iz in 0..out_shape[0] {
        let z = nearest((iz as f64 + 0.5) * scale[0] - 0.5, shape[0]);
        for iy in 0..out_shape[1] {
            let y = nearest((iy as f64 + 0.5) * scale[1] - 0.5, shape[1]);
            for ix in 0..out_shape[2] {
                let x = nearest((ix as f64 + 0.5) * scale[2] - 0.5, shape[2]);
                out[[iz, iy, ix]] = src[[z, y, x]];
            }
        }
    }
    LabelMap::new(out, l.num_classes(), target_spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp_volume(n: usize, spacing: f64) -> Volume {
        // value = physical x coordinate in mm
        let data = Array3::from_shape_fn((n, n, n), |(_, _, x)| ((x as f64 + 0.5) * spacing) as f32);
        Volume::from_scalar(data, [spacing; 3]).unwrap()
    }

    #[test]
    fn rejects_nonpositive_spacing() {
        let data = Array3::<f32>::zeros((4, 4, 4));
        assert!(Volume::from_scalar(data.clone(), [0.0, 1.0, 1.0]).is_err());
        assert!(Volume::from_scalar(data, [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn rejects_nan_data() {
        let mut data = Array3::<f32>::zeros((4, 4, 4));
        data[[1, 2, 3]] = f32::NAN;
        assert!(Volume::from_scalar(data, [1.0; 3]).is_err());
    }

    #[test]
    fn resample_identity_spacing_is_exact() {
        let v = ramp_volume(8, 1.5);
        let r = resample(&v, [1.5; 3]).unwrap();
        assert_eq!(r.shape(), v.shape());
        for (a, b) in r.data().iter().zip(v.data().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resample_shape_arithmetic() {
        let data = Array3::<f32>::zeros((64, 64, 64));
        let v = Volume::from_scalar(data, [3.0; 3]).unwrap();
        let r = resample(&v, [1.5; 3]).unwrap();
        assert_eq!(r.shape(), [128, 128, 128]);
        assert_eq!(r.spacing(), [1.5; 3]);
    }

    #[test]
    fn resample_linear_ramp_matches_analytic() {
        // Upsample a linear ramp 2x; interior values must match the analytic
        // ramp (trilinear interpolation is exact on affine fields away from
        // the clamped border).
        let v = ramp_volume(16, 2.0);
        let r = resample(&v, [1.0; 3]).unwrap();
        assert_eq!(r.shape(), [32, 32, 32]);
        let f = r.channel(0);
        for x in 2..30 {
            let analytic = (x as f64 + 0.5) * 1.0;
            let got = f[[8, 8, x]] as f64;
            assert!(
                (got - analytic).abs() < 1e-5,
                "x={x}: got {got}, want {analytic}"
            );
        }
    }

    #[test]
    fn resample_constant_volume_is_constant() {
        let data = Array3::from_elem((9, 7, 5), 3.25f32);
        let v = Volume::from_scalar(data, [2.0, 1.0, 1.5]).unwrap();
        let r = resample(&v, [0.7, 1.3, 2.1]).unwrap();
        for &val in r.data().iter() {
            assert_eq!(val, 3.25);
        }
    }

    #[test]
    fn resample_round_trip_on_smooth_volume() {
        // Smooth low-frequency volume; down-then-up round trip must stay
        // within 1% of the dynamic range in masked MAE.
        let n = 32;
        let data = Array3::from_shape_fn((n, n, n), |(z, y, x)| {
            let f = |t: usize| (t as f64 / n as f64 * std::f64::consts::PI).sin();
            (f(z) * f(y) * f(x)) as f32
        });
        let v = Volume::from_scalar(data, [1.0; 3]).unwrap();
        let down = resample(&v, [2.0; 3]).unwrap();
        let back = resample(&down, [1.0; 3]).unwrap();
        assert_eq!(back.shape(), v.shape());
        let (lo, hi) = v.min_max();
        let range = (hi - lo) as f64;
        let a = v.channel(0);
        let b = back.channel(0);
        let mut err = 0.0f64;
        let mut count = 0usize;
        for z in 4..n - 4 {
            for y in 4..n - 4 {
                for x in 4..n - 4 {
                    err += (a[[z, y, x]] as f64 - b[[z, y, x]] as f64).abs();
                    count += 1;
                }
            }
        }
        let mae = err / count as f64;
        assert!(mae < 0.01 * range, "masked MAE {mae} vs range {range}");
    }

    #[test]
    fn resample_labels_identity() {
        let labels = Array3::from_shape_fn((6, 6, 6), |(z, _, _)| (z % 3) as u8);
        let l = LabelMap::new(labels, 3, [1.5; 3]).unwrap();
        let r = resample_labels(&l, [1.5; 3]).unwrap();
        assert_eq!(r.labels(), l.labels());
    }

    #[test]
    fn resample_labels_half_split_boundary() {
        // Two-class cube split at x = n/2; after 2x upsampling the class
        // boundary must sit within 1 voxel of the analytic plane.
        let n = 16;
        let labels = Array3::from_shape_fn((n, n, n), |(_, _, x)| u8::from(x >= n / 2));
        let l = LabelMap::new(labels, 2, [2.0; 3]).unwrap();
        let r = resample_labels(&l, [1.0; 3]).unwrap();
        assert_eq!(r.shape(), [32, 32, 32]);
        // Analytic plane in the output grid: x = 16.
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let got = r.labels()[[z, y, x]];
                    let expect = u8::from(x >= 16);
                    if (x as isize - 16).abs() > 1 {
                        assert_eq!(got, expect, "at x={x}");
                    }
                }
            }
        }
    }

    #[test]
    fn resample_labels_all_background() {
        let l = LabelMap::new(Array3::zeros((8, 8, 8)), 4, [2.0; 3]).unwrap();
        let r = resample_labels(&l, [1.0; 3]).unwrap();
        assert_eq!(r.shape(), [16, 16, 16]);
        assert!(r.labels().iter().all(|&v| v == 0));
    }

    #[test]
    fn labelmap_rejects_out_of_range() {
        let mut labels = Array3::<u8>::zeros((4, 4, 4));
        labels[[0, 0, 0]] = 5;
        assert!(LabelMap::new(labels, 3, [1.0; 3]).is_err());
    }

    #[test]
    fn znormalize_constant_is_zero() {
        let v = Volume::from_scalar(Array3::from_elem((4, 4, 4), 7.0), [1.0; 3]).unwrap();
        let z = v.znormalize();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn znormalize_moments() {
        let data = Array3::from_shape_fn((8, 8, 8), |(z, y, x)| (z * 64 + y * 8 + x) as f32);
        let v = Volume::from_scalar(data, [1.0; 3]).unwrap();
        let z = v.znormalize();
        let n = z.data().len() as f64;
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dataset_requires_consistent_classes() {
        let v = || Volume::from_scalar(Array3::zeros((4, 4, 4)), [1.0; 3]).unwrap();
        let l = |k| LabelMap::new(Array3::zeros((4, 4, 4)), k, [1.0; 3]).unwrap();
        let ok = Dataset::new(vec![(v(), Some(l(3))), (v(), Some(l(3)))], "a");
        assert!(ok.is_ok());
        let bad = Dataset::new(vec![(v(), Some(l(3))), (v(), Some(l(4)))], "a");
        assert!(bad.is_err());
    }
}
