//! Volume file IO.
//!
//! Two formats are supported:
//! * raw: `<name>.bin` little-endian float32 in canonical `(channel, z, y, x)`
//!   order plus a `<name>.meta` UTF-8 sidecar with keys `shape`, `spacing_mm`,
//!   `channels`, `dtype`. Round trips are bit-exact.
//! * NIfTI-1 (`.nii` / `.nii.gz`) for interoperability.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use ndarray::Array4;

use crate::error::{CoreError, Result};
use crate::volume::Volume;

/// Loads a volume, dispatching on the file extension.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti(path)
    } else {
        load_raw(path)
    }
}

/// Saves a volume, dispatching on the file extension.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        save_nifti(v, path)
    } else {
        save_raw(v, path)
    }
}

fn meta_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("meta")
}

fn save_raw(v: &Volume, path: &Path) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    let mut buf = Vec::with_capacity(v.data().len() * 4);
    for &val in v.data().iter() {
        buf.extend_from_slice(&val.to_le_bytes());
    }
    writer.write_all(&buf)?;
    writer.flush()?;

    let [sz, sy, sx] = v.shape();
    let [pz, py, px] = v.spacing();
    let meta = format!(
        "shape = {sz} {sy} {sx}\nspacing_mm = {pz} {py} {px}\nchannels = {}\ndtype = float32\n",
        v.channels()
    );
    std::fs::write(meta_path(path), meta)?;
    Ok(())
}

fn load_raw(path: &Path) -> Result<Volume> {
    let meta_file = meta_path(path);
    let meta = std::fs::read_to_string(&meta_file).map_err(|e| {
        CoreError::format(format!("cannot read sidecar {}: {e}", meta_file.display()))
    })?;

    let mut shape: Option<[usize; 3]> = None;
    let mut spacing: Option<[f64; 3]> = None;
    let mut channels: Option<usize> = None;
    let mut dtype: Option<String> = None;
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CoreError::format(format!("sidecar line is not `key = value`: {line}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "shape" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| CoreError::format(format!("field shape: bad token {t}"))))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(CoreError::format("field shape: expected 3 extents"));
                }
                shape = Some([parts[0], parts[1], parts[2]]);
            }
            "spacing_mm" => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| CoreError::format(format!("field spacing_mm: bad token {t}")))
                    })
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(CoreError::format("field spacing_mm: expected 3 values"));
                }
                spacing = Some([parts[0], parts[1], parts[2]]);
            }
            "channels" => {
                channels = Some(value.parse().map_err(|_| {
                    CoreError::format(format!("field channels: bad value {value}"))
                })?);
            }
            "dtype" => dtype = Some(value.to_string()),
            _ => {} // unknown keys are ignored
        }
    }

    let shape = shape.ok_or_else(|| CoreError::format("missing field shape"))?;
    let spacing = spacing.ok_or_else(|| CoreError::format("missing field spacing_mm"))?;
    let channels = channels.ok_or_else(|| CoreError::format("missing field channels"))?;
    let dtype = dtype.ok_or_else(|| CoreError::format("missing field dtype"))?;
    if dtype != "float32" {
        return Err(CoreError::format(format!(
            "field dtype: unsupported value {dtype} (expected float32)"
        )));
    }

    let bytes = std::fs::read(path)?;
    let expected = channels * shape[0] * shape[1] * shape[2] * 4;
    if bytes.len() != expected {
        return Err(CoreError::format(format!(
            "payload size {} does not match shape/channels (expected {expected} bytes)",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let data = Array4::from_shape_vec((channels, shape[0], shape[1], shape[2]), values)
        .map_err(|e| CoreError::format(format!("shape mismatch: {e}")))?;
    Volume::new(data, spacing)
}

// --- NIfTI-1 ---------------------------------------------------------------

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

fn rd_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn rd_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    if path.to_string_lossy().ends_with(".gz") {
        MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn load_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(CoreError::format(format!(
            "field sizeof_hdr: file too short ({} bytes)",
            bytes.len()
        )));
    }
    let sizeof_hdr = rd_i32(&bytes, 0);
    if sizeof_hdr != 348 {
        return Err(CoreError::format(format!(
            "field sizeof_hdr: expected 348, got {sizeof_hdr} (big-endian files are not supported)"
        )));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(CoreError::format(format!(
            "field magic: expected n+1, got {:?}",
            String::from_utf8_lossy(&magic[..3])
        )));
    }
    if magic == b"ni1\0" {
        return Err(CoreError::format(
            "field magic: two-file (.hdr/.img) NIfTI is not supported",
        ));
    }

    let ndim = rd_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(CoreError::format(format!("field dim[0]: invalid value {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = rd_i16(&bytes, 40 + 2 * (i + 1));
        if v < 1 {
            return Err(CoreError::format(format!("field dim[{}]: invalid extent {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[4] > 1 || dims[5] > 1 || dims[6] > 1 {
        return Err(CoreError::format(
            "field dim: more than 4 non-trivial dimensions are not supported",
        ));
    }
    let (nx, ny, nz, nt) = (dims[0], dims[1], dims[2], dims[3]);

    let datatype = rd_i16(&bytes, 70);
    let elem = match datatype {
        2 => 1,   // uint8
        4 => 2,   // int16
        8 => 4,   // int32
        16 => 4,  // float32
        64 => 8,  // float64
        256 => 1, // int8
        512 => 2, // uint16
        other => {
            return Err(CoreError::format(format!(
                "field datatype: unsupported code {other}"
            )))
        }
    };

    let mut pixdim = [1.0f64; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        let v = rd_f32(&bytes, 76 + 4 * (i + 1)) as f64;
        if !(v > 0.0) || !v.is_finite() {
            return Err(CoreError::format(format!(
                "field pixdim[{}]: invalid spacing {v}",
                i + 1
            )));
        }
        *p = v;
    }

    let vox_offset = rd_f32(&bytes, 108);
    if vox_offset < 348.0 || vox_offset.fract() != 0.0 {
        return Err(CoreError::format(format!(
            "field vox_offset: invalid value {vox_offset}"
        )));
    }
    let offset = vox_offset as usize;

    let scl_slope = rd_f32(&bytes, 112);
    let scl_inter = rd_f32(&bytes, 116);
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0f32, 0.0f32)
    } else {
        (scl_slope, scl_inter)
    };

    let count = nx * ny * nz * nt;
    let need = offset + count * elem;
    if bytes.len() < need {
        return Err(CoreError::format(format!(
            "field dim: payload truncated (need {need} bytes, have {})",
            bytes.len()
        )));
    }
    let payload = &bytes[offset..offset + count * elem];
    let mut values = Vec::with_capacity(count);
    match datatype {
        2 => values.extend(payload.iter().map(|&b| b as f32)),
        256 => values.extend(payload.iter().map(|&b| b as i8 as f32)),
        4 => values.extend(payload.chunks_exact(2).map(|c| rd_i16(c, 0) as f32)),
        512 => values.extend(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32),
        ),
        8 => values.extend(payload.chunks_exact(4).map(|c| rd_i32(c, 0) as f32)),
        16 => values.extend(payload.chunks_exact(4).map(|c| rd_f32(c, 0))),
        64 => values.extend(payload.chunks_exact(8).map(|c| {
            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
        })),
        _ => unreachable!(),
    }
    if slope != 1.0 || inter != 0.0 {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }

    // NIfTI stores x fastest, then y, z, t; our canonical order (c, z, y, x)
    // stores x fastest, then y, z, c, so a channels-last to channels-first
    // reorder is all that is needed.
    let mut data = Array4::<f32>::zeros((nt, nz, ny, nx));
    {
        let mut idx = 0usize;
        for t in 0..nt {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        data[[t, z, y, x]] = values[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    // spacing in canonical (z, y, x) order
    Volume::new(data, [pixdim[2], pixdim[1], pixdim[0]])
}

fn save_nifti(v: &Volume, path: &Path) -> Result<()> {
    let [nz, ny, nx] = v.shape();
    let nt = v.channels();
    let [sz, sy, sx] = v.spacing();

    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[39] = b'r'; // regular

    let ndim: i16 = if nt > 1 { 4 } else { 3 };
    let dims: [i16; 8] = [ndim, nx as i16, ny as i16, nz as i16, nt as i16, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&16i16.to_le_bytes()); // float32
    h[72..74].copy_from_slice(&32i16.to_le_bytes()); // bitpix

    let pixdim: [f32; 8] = [1.0, sx as f32, sy as f32, sz as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[123] = 2; // xyzt_units: mm

    // sform: scaled identity
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    let srow_x: [f32; 4] = [sx as f32, 0.0, 0.0, 0.0];
    let srow_y: [f32; 4] = [0.0, sy as f32, 0.0, 0.0];
    let srow_z: [f32; 4] = [0.0, 0.0, sz as f32, 0.0];
    for (row, off) in [(&srow_x, 280), (&srow_y, 296), (&srow_z, 312)] {
        for (i, val) in row.iter().enumerate() {
            h[off + 4 * i..off + 4 * (i + 1)].copy_from_slice(&val.to_le_bytes());
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 stay zero: no extensions

    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for t in 0..nt {
        let ch = v.channel(t);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    payload.extend_from_slice(&ch[[z, y, x]].to_le_bytes());
                }
            }
        }
    }

    let file = File::create(path)?;
    if path.to_string_lossy().ends_with(".gz") {
        let mut enc = GzEncoder::new(BufWriter::new(file), flate2::Compression::fast());
        enc.write_all(&h)?;
        enc.write_all(&payload)?;
        enc.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&h)?;
        w.write_all(&payload)?;
        w.flush()?;
    }
    Ok(())
}
