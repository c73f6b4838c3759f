//! Self-similarity context (SSC) descriptor.
//!
//! Maps a single-channel volume to 12 channels of exponentiated,
//! variance-normalized patch distances between diagonally adjacent
//! 6-neighborhood patches: `exp(-SSD / sigma^2)` per pair, with the local
//! variance estimated as the mean of the 12 pairwise SSDs at each voxel.

use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{CoreError, Result};
use crate::volume::Volume;

/// Offset in voxel units, canonical `(z, y, x)` order.
pub type Offset = [i64; 3];

/// Parameters of the SSC descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct SscConfig {
    /// Side length of the compared patches, in voxels.
    pub patch_size: usize,
    /// Distance of the neighborhood patches from the center, in voxels.
    pub patch_distance: usize,
    /// Variance clamp `(low_factor, high_factor)` relative to the image-wide
    /// mean variance.
    pub variance_clamp: (f64, f64),
    /// Small positive constant added to the clamped variance denominator.
    pub stability_eps: f64,
}

impl Default for SscConfig {
    fn default() -> Self {
        Self {
            patch_size: 1,
            patch_distance: 1,
            variance_clamp: (0.001, 1000.0),
            stability_eps: 1e-12,
        }
    }
}

impl SscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 1 {
            return Err(CoreError::invalid("patch_size must be >= 1"));
        }
        if self.patch_distance < 1 {
            return Err(CoreError::invalid("patch_distance must be >= 1"));
        }
        let (lo, hi) = self.variance_clamp;
        if !(lo > 0.0 && lo < 1.0 && hi > 1.0) {
            return Err(CoreError::invalid(format!(
                "variance_clamp must satisfy 0 < low < 1 < high, got ({lo}, {hi})"
            )));
        }
        if !(self.stability_eps > 0.0) {
            return Err(CoreError::invalid("stability_eps must be positive"));
        }
        Ok(())
    }
}

/// The 12 ordered pairs of 6-neighborhood offsets whose patches are
/// diagonally adjacent (`|o_i - o_j|^2 = 2 d^2`, equivalently orthogonal
/// axis offsets).
///
/// Ordering is lexicographic over `(o_i, o_j)` in `(z, y, x)` component
/// order and is frozen: channel `k` of the descriptor always corresponds to
/// entry `k` of this table.
pub fn diagonal_pair_table(patch_distance: usize) -> Vec<(Offset, Offset)> {
    let d = patch_distance as i64;
    let mut offsets: Vec<Offset> = vec![
        [-d, 0, 0],
        [0, -d, 0],
        [0, 0, -d],
        [0, 0, d],
        [0, d, 0],
        [d, 0, 0],
    ];
    offsets.sort();
    let mut pairs = Vec::with_capacity(12);
    for i in 0..offsets.len() {
        for j in (i + 1)..offsets.len() {
            let (a, b) = (offsets[i], offsets[j]);
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            if dot == 0 {
                pairs.push((a, b));
            }
        }
    }
    pairs.sort();
    pairs
}

#[inline]
fn clamped(field: &ArrayView3<'_, f32>, z: i64, y: i64, x: i64) -> f64 {
    let (nz, ny, nx) = field.dim();
    let z = z.clamp(0, nz as i64 - 1) as usize;
    let y = y.clamp(0, ny as i64 - 1) as usize;
    let x = x.clamp(0, nx as i64 - 1) as usize;
    field[[z, y, x]] as f64
}

/// Computes the 12-channel SSC descriptor of a single-channel volume.
///
/// Values are in `(0, 1]`; the spatial shape is preserved via edge-clamped
/// patch reads at the borders.
pub fn ssc_descriptor(v: &Volume, cfg: &SscConfig) -> Result<Volume> {
    cfg.validate()?;
    let field = v.scalar()?;
    let (nz, ny, nx) = field.dim();
    let pairs = diagonal_pair_table(cfg.patch_distance);
    debug_assert_eq!(pairs.len(), 12);

    // Patch window around each position; floor/ceil split covers even sizes,
    // and patch_size 1 reduces to the single voxel.
    let half_lo = (cfg.patch_size as i64 - 1) / 2;
    let half_hi = cfg.patch_size as i64 / 2;

    let mut ssd = Array4::<f64>::zeros((12, nz, ny, nx));
    for (k, (oi, oj)) in pairs.iter().enumerate() {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (zi, yi, xi) = (z as i64 + oi[0], y as i64 + oi[1], x as i64 + oi[2]);
                    let (zj, yj, xj) = (z as i64 + oj[0], y as i64 + oj[1], x as i64 + oj[2]);
                    let mut acc = 0.0f64;
                    for dz in -half_lo..=half_hi {
                        for dy in -half_lo..=half_hi {
                            for dx in -half_lo..=half_hi {
                                let a = clamped(&field, zi + dz, yi + dy, xi + dx);
                                let b = clamped(&field, zj + dz, yj + dy, xj + dx);
                                let diff = a - b;
                                acc += diff * diff;
                            }
                        }
                    }
                    ssd[[k, z, y, x]] = acc;
                }
            }
        }
    }

    // Local variance estimate: mean of the 12 pairwise SSDs per voxel,
    // clamped relative to its image-wide mean.
    let mut var = Array3::<f64>::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut s = 0.0;
                for k in 0..12 {
                    s += ssd[[k, z, y, x]];
                }
                var[[z, y, x]] = s / 12.0;
            }
        }
    }
    let mean_var = var.iter().sum::<f64>() / var.len() as f64;
    let (lo_f, hi_f) = cfg.variance_clamp;
    let (lo, hi) = (lo_f * mean_var, hi_f * mean_var);

    let mut out = Array4::<f32>::zeros((12, nz, ny, nx));
    for k in 0..12 {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let denom = var[[z, y, x]].clamp(lo, hi) + cfg.stability_eps;
                    out[[k, z, y, x]] = (-ssd[[k, z, y, x]] / denom).exp() as f32;
                }
            }
        }
    }
    Volume::new(out, v.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn random_volume(n: usize, seed: u64) -> Volume {
        let mut rng = derive_rng(seed, &[7]);
        let data = Array3::from_shape_fn((n, n, n), |_| rng.gen_range(-1.0f32..1.0));
        Volume::from_scalar(data, [1.0; 3]).unwrap()
    }

    #[test]
    fn pair_table_has_twelve_frozen_entries() {
        let t = diagonal_pair_table(1);
        assert_eq!(t.len(), 12);
        // Frozen first and last entries of the lexicographic ordering.
        assert_eq!(t[0], ([-1, 0, 0], [0, -1, 0]));
        assert_eq!(t[11], ([0, 1, 0], [1, 0, 0]));
        // Deterministic across calls.
        assert_eq!(t, diagonal_pair_table(1));
    }

    #[test]
    fn pair_table_offsets_are_orthogonal() {
        for (a, b) in diagonal_pair_table(2) {
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            assert_eq!(dot, 0);
            let d2: i64 = (0..3).map(|i| (a[i] - b[i]).pow(2)).sum();
            assert_eq!(d2, 2 * 4);
        }
    }

    #[test]
    fn pair_table_no_duplicates_under_exchange() {
        // All C(6,2)=15 unordered pairs minus the 3 antipodal ones.
        let t = diagonal_pair_table(1);
        let mut seen = std::collections::HashSet::new();
        for (a, b) in &t {
            let key = if a <= b { (*a, *b) } else { (*b, *a) };
            assert!(seen.insert(key), "duplicated pair {key:?}");
        }
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn constant_volume_gives_all_ones() {
        let v = Volume::from_scalar(Array3::from_elem((6, 6, 6), 4.2), [1.0; 3]).unwrap();
        let d = ssc_descriptor(&v, &SscConfig::default()).unwrap();
        assert_eq!(d.channels(), 12);
        for &val in d.data().iter() {
            assert_eq!(val, 1.0);
        }
    }

    #[test]
    fn rejects_multichannel_input() {
        let data = ndarray::Array4::<f32>::zeros((2, 4, 4, 4));
        let v = Volume::new(data, [1.0; 3]).unwrap();
        assert!(ssc_descriptor(&v, &SscConfig::default()).is_err());
    }

    #[test]
    fn output_range_strictly_positive_at_most_one() {
        let v = random_volume(10, 3);
        let d = ssc_descriptor(&v, &SscConfig::default()).unwrap();
        for &val in d.data().iter() {
            assert!(val > 0.0 && val <= 1.0 + 1e-7, "value {val} out of range");
        }
    }

    /// Brute-force oracle: explicit patch extraction and direct evaluation
    /// per voxel per pair. Kept independent of the implementation's shifted
    /// accumulation path.
    fn ssc_oracle(v: &Volume, cfg: &SscConfig) -> Array4<f64> {
        let field = v.scalar().unwrap();
        let (nz, ny, nx) = field.dim();
        let d = cfg.patch_distance as i64;
        // Re-derive the pair table the slow way: all ordered offset pairs,
        // filtered by squared separation, deduplicated, sorted.
        let mut offs: Vec<Offset> = Vec::new();
        for axis in 0..3 {
            for sign in [-1i64, 1] {
                let mut o = [0i64; 3];
                o[axis] = sign * d;
                offs.push(o);
            }
        }
        offs.sort();
        let mut pairs = Vec::new();
        for a in &offs {
            for b in &offs {
                let sep: i64 = (0..3).map(|i| (a[i] - b[i]).pow(2)).sum();
                if sep == 2 * d * d && a < b {
                    pairs.push((*a, *b));
                }
            }
        }
        pairs.sort();
        assert_eq!(pairs.len(), 12);

        let read = |z: i64, y: i64, x: i64| -> f64 {
            let z = z.clamp(0, nz as i64 - 1) as usize;
            let y = y.clamp(0, ny as i64 - 1) as usize;
            let x = x.clamp(0, nx as i64 - 1) as usize;
            field[[z, y, x]] as f64
        };
        let extract_patch = |cz: i64, cy: i64, cx: i64| -> Vec<f64> {
            let half_lo = (cfg.patch_size as i64 - 1) / 2;
            let half_hi = cfg.patch_size as i64 / 2;
            let mut p = Vec::new();
            for dz in -half_lo..=half_hi {
                for dy in -half_lo..=half_hi {
                    for dx in -half_lo..=half_hi {
                        p.push(read(cz + dz, cy + dy, cx + dx));
                    }
                }
            }
            p
        };

        let mut ssd = Array4::<f64>::zeros((12, nz, ny, nx));
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    for (k, (oi, oj)) in pairs.iter().enumerate() {
                        let pa = extract_patch(z + oi[0], y + oi[1], x + oi[2]);
                        let pb = extract_patch(z + oj[0], y + oj[1], x + oj[2]);
                        let s: f64 = pa.iter().zip(&pb).map(|(a, b)| (a - b) * (a - b)).sum();
                        ssd[[k, z as usize, y as usize, x as usize]] = s;
                    }
                }
            }
        }

        let mut var = Array3::<f64>::zeros((nz, ny, nx));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    var[[z, y, x]] = (0..12).map(|k| ssd[[k, z, y, x]]).sum::<f64>() / 12.0;
                }
            }
        }
        let m = var.iter().sum::<f64>() / var.len() as f64;
        let mut out = Array4::<f64>::zeros((12, nz, ny, nx));
        for k in 0..12 {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let denom = var[[z, y, x]].clamp(cfg.variance_clamp.0 * m, cfg.variance_clamp.1 * m)
                            + cfg.stability_eps;
                        out[[k, z, y, x]] = (-ssd[[k, z, y, x]] / denom).exp();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let cfg = SscConfig::default();
        for seed in 0..5u64 {
            let v = random_volume(8, 100 + seed);
            let got = ssc_descriptor(&v, &cfg).unwrap();
            let want = ssc_oracle(&v, &cfg);
            let mut max_diff = 0.0f64;
            for (a, b) in got.data().iter().zip(want.iter()) {
                max_diff = max_diff.max((*a as f64 - b).abs());
            }
            assert!(max_diff < 1e-6, "seed {seed}: max diff {max_diff}");
        }
    }

    #[test]
    fn matches_oracle_with_patch_size_three() {
        let cfg = SscConfig {
            patch_size: 3,
            ..SscConfig::default()
        };
        let v = random_volume(7, 42);
        let got = ssc_descriptor(&v, &cfg).unwrap();
        let want = ssc_oracle(&v, &cfg);
        let mut max_diff = 0.0f64;
        for (a, b) in got.data().iter().zip(want.iter()) {
            max_diff = max_diff.max((*a as f64 - b).abs());
        }
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn positive_affine_intensity_invariance() {
        let cfg = SscConfig::default();
        let v = random_volume(10, 11);
        let remapped = Volume::from_scalar(v.channel(0).mapv(|t| 2.0 * t + 5.0), [1.0; 3]).unwrap();
        let a = ssc_descriptor(&v, &cfg).unwrap();
        let b = ssc_descriptor(&remapped, &cfg).unwrap();
        // Interior mask: exclude the one-voxel border ring touched by clamping.
        let (mut err, mut count) = (0.0f64, 0usize);
        for k in 0..12 {
            let fa = a.channel(k);
            let fb = b.channel(k);
            for z in 1..9 {
                for y in 1..9 {
                    for x in 1..9 {
                        err += (fa[[z, y, x]] as f64 - fb[[z, y, x]] as f64).abs();
                        count += 1;
                    }
                }
            }
        }
        let mae = err / count as f64;
        assert!(mae < 0.05, "masked MAE {mae}");
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let cfg = SscConfig::default();
        let v = random_volume(9, 5);
        let n = 9usize;
        // Circular shift by one voxel along x.
        let shifted = Array3::from_shape_fn((n, n, n), |(z, y, x)| v.channel(0)[[z, y, (x + 1) % n]]);
        let vs = Volume::from_scalar(shifted, [1.0; 3]).unwrap();
        let a = ssc_descriptor(&v, &cfg).unwrap();
        let b = ssc_descriptor(&vs, &cfg).unwrap();
        for k in 0..12 {
            let fa = a.channel(k);
            let fb = b.channel(k);
            for z in 2..n - 2 {
                for y in 2..n - 2 {
                    for x in 2..n - 3 {
                        let d = (fa[[z, y, x + 1]] as f64 - fb[[z, y, x]] as f64).abs();
                        assert!(d < 2e-2, "k={k} at ({z},{y},{x}): {d}");
                    }
                }
            }
        }
    }
}
