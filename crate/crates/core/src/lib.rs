//! Domain-generalized pre-training and test-time adaptation for 3D
//! patch-based segmentation, with a synthetic cross-domain benchmark.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gin;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod metrics;
pub mod rng;
pub mod stats;
pub mod segnet;
pub mod spatial;
pub mod ssc;
pub mod synth;
pub mod tta;
pub mod volume;

pub use error::{CoreError, Result};
pub use volume::{Dataset, LabelMap, Volume};
