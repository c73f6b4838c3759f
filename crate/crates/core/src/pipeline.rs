//! Input pipelines: how raw intensities become network input.
//!
//! GIN is a training-time augmentation and never runs at inference. SSC is a
//! representation change: a model trained on descriptors needs them at test
//! time too, which is forced by the channel-count contract (1 raw, 12 SSC).

use crate::error::{CoreError, Result};
use crate::ssc::{ssc_descriptor, SscConfig};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Plain,
    Gin,
    Ssc,
    GinSsc,
}

impl Pipeline {
    pub fn uses_gin(&self) -> bool {
        matches!(self, Pipeline::Gin | Pipeline::GinSsc)
    }

    pub fn uses_ssc(&self) -> bool {
        matches!(self, Pipeline::Ssc | Pipeline::GinSsc)
    }

    /// Channel count the segmentation network must accept.
    pub fn in_channels(&self) -> usize {
        if self.uses_ssc() {
            12
        } else {
            1
        }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Pipeline::Plain),
            "gin" => Ok(Pipeline::Gin),
            "ssc" => Ok(Pipeline::Ssc),
            "gin_ssc" => Ok(Pipeline::GinSsc),
            other => Err(CoreError::Config(format!(
                "unknown pipeline {other} (expected plain, gin, ssc or gin_ssc)"
            ))),
        }
    }
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pipeline::Plain => "plain",
            Pipeline::Gin => "gin",
            Pipeline::Ssc => "ssc",
            Pipeline::GinSsc => "gin_ssc",
        })
    }
}

/// Test-time input preparation: optional z-normalization followed by the
/// descriptor when the pipeline was trained on SSC input.
pub fn prepare_inference_input(
    v: &Volume,
    pipeline: Pipeline,
    znormalize: bool,
    ssc: &SscConfig,
) -> Result<Volume> {
    let v = if znormalize { v.znormalize() } else { v.clone() };
    if pipeline.uses_ssc() {
        ssc_descriptor(&v, ssc)
    } else {
        Ok(v)
    }
}
