//! Checkpoint directories: a plain-text manifest plus a versioned binary
//! parameter payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::norm::NormKind;
use crate::pipeline::Pipeline;
use crate::segnet::{SegModel, SegModelConfig};
use crate::ssc::SscConfig;

const PAYLOAD_MAGIC: &[u8; 8] = b"DGTTAPRM";
const PAYLOAD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.toml";
pub const PARAMS_FILE: &str = "params.bin";

/// Everything needed to rebuild the model and its inference-time input
/// pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub version: u32,
    pub pipeline: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub norm_kind: String,
    pub norm_affine: bool,
    pub znormalize: bool,
    pub seed: u64,
    pub epochs_trained: usize,
    pub pretrain_config_hash: String,
    pub ssc_patch_size: usize,
    pub ssc_patch_distance: usize,
    pub ssc_clamp_low: f64,
    pub ssc_clamp_high: f64,
    pub ssc_stability_eps: f64,
}

impl CheckpointManifest {
    pub fn pipeline(&self) -> Result<Pipeline> {
        self.pipeline.parse()
    }

    pub fn norm_kind(&self) -> Result<NormKind> {
        match self.norm_kind.as_str() {
            "instance" => Ok(NormKind::Instance),
            "batch" => Ok(NormKind::Batch),
            other => Err(CoreError::format(format!(
                "field norm_kind: unknown value {other}"
            ))),
        }
    }

    pub fn model_config(&self) -> Result<SegModelConfig> {
        Ok(SegModelConfig {
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            base_width: self.base_width,
            depth: self.depth,
            norm_kind: self.norm_kind()?,
            norm_affine: self.norm_affine,
            seed: self.seed,
        })
    }

    pub fn ssc_config(&self) -> SscConfig {
        SscConfig {
            patch_size: self.ssc_patch_size,
            patch_distance: self.ssc_patch_distance,
            variance_clamp: (self.ssc_clamp_low, self.ssc_clamp_high),
            stability_eps: self.ssc_stability_eps,
        }
    }

    /// True when two checkpoints can participate in one ensemble.
    pub fn compatible_with(&self, other: &CheckpointManifest) -> bool {
        self.pipeline == other.pipeline
            && self.in_channels == other.in_channels
            && self.num_classes == other.num_classes
            && self.znormalize == other.znormalize
    }
}

pub fn save_checkpoint(
    model: &mut SegModel<f32>,
    manifest: &CheckpointManifest,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let toml_text = toml::to_string_pretty(manifest)
        .map_err(|e| CoreError::format(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), toml_text)?;

    let entries = model.state_entries();
    let mut payload = Vec::new();
    payload.extend_from_slice(PAYLOAD_MAGIC);
    payload.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
    payload.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, data) in &entries {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(dir.join(PARAMS_FILE))?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CoreError::format(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CoreError::format(format!("manifest parse: {e}")))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(SegModel<f32>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut model = SegModel::<f32>::init(manifest.model_config()?)?;

    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(PARAMS_FILE))?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    if take(&bytes, &mut pos, 8)? != PAYLOAD_MAGIC {
        return Err(CoreError::format("field magic: not a parameter payload"));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap());
    if version != PAYLOAD_VERSION {
        return Err(CoreError::format(format!(
            "field version: unsupported payload version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&bytes, &mut pos, name_len)?.to_vec())
            .map_err(|_| CoreError::format("field name: invalid utf-8"))?;
        let data_len = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&bytes, &mut pos, data_len * 4)?;
        let mut data = Vec::with_capacity(data_len);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        entries.push((name, data));
    }
    model.load_state_entries(&entries)?;
    Ok((model, manifest))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(CoreError::format("parameter payload truncated"));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}
