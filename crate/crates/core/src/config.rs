//! Sectioned plain-text run configuration.
//!
//! One file carries every tunable of a run, grouped into `[gin]`, `[ssc]`,
//! `[spatial]`, `[pretrain]`, `[tta]`, `[phantom]` and `[scenario]` sections;
//! omitted keys fall back to the defaults used throughout the crate.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gin::GinConfig;
use crate::nn::norm::NormKind;
use crate::pipeline::Pipeline;
use crate::pretrain::PretrainConfig;
use crate::segnet::{ParamGroup, SegModelConfig};
use crate::spatial::SpatialConfig;
use crate::ssc::SscConfig;
use crate::synth::{IntensityDomain, IntensityTransfer, PhantomConfig};
use crate::tta::AdaptationConfig;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub gin: GinSection,
    #[serde(default)]
    pub ssc: SscSection,
    #[serde(default)]
    pub spatial: SpatialSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub tta: TtaSection,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(format!("config parse: {e}")))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GinSection {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub renormalize_output: bool,
    pub seed: u64,
}

impl Default for GinSection {
    fn default() -> Self {
        let g = GinConfig::default();
        Self {
            num_layers: g.num_layers,
            hidden_channels: g.hidden_channels,
            kernel_size: g.kernel_size,
            alpha_low: g.alpha_distribution.0,
            alpha_high: g.alpha_distribution.1,
            renormalize_output: g.renormalize_output,
            seed: g.seed,
        }
    }
}

impl GinSection {
    pub fn to_config(&self) -> GinConfig {
        GinConfig {
            num_layers: self.num_layers,
            hidden_channels: self.hidden_channels,
            kernel_size: self.kernel_size,
            alpha_distribution: (self.alpha_low, self.alpha_high),
            renormalize_output: self.renormalize_output,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SscSection {
    pub patch_size: usize,
    pub patch_distance: usize,
    pub clamp_low: f64,
    pub clamp_high: f64,
    pub stability_eps: f64,
}

impl Default for SscSection {
    fn default() -> Self {
        let s = SscConfig::default();
        Self {
            patch_size: s.patch_size,
            patch_distance: s.patch_distance,
            clamp_low: s.variance_clamp.0,
            clamp_high: s.variance_clamp.1,
            stability_eps: s.stability_eps,
        }
    }
}

impl SscSection {
    pub fn to_config(&self) -> SscConfig {
        SscConfig {
            patch_size: self.patch_size,
            patch_distance: self.patch_distance,
            variance_clamp: (self.clamp_low, self.clamp_high),
            stability_eps: self.stability_eps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialSection {
    pub max_rotation_deg: f64,
    pub max_scale_delta: f64,
    pub max_translation_vox: f64,
    pub validity_threshold: f64,
    pub sentinel: f32,
}

impl Default for SpatialSection {
    fn default() -> Self {
        let s = SpatialConfig::default();
        Self {
            max_rotation_deg: s.max_rotation_deg,
            max_scale_delta: s.max_scale_delta,
            max_translation_vox: s.max_translation_vox,
            validity_threshold: s.validity_threshold,
            sentinel: s.sentinel,
        }
    }
}

impl SpatialSection {
    pub fn to_config(&self) -> SpatialConfig {
        SpatialConfig {
            max_rotation_deg: self.max_rotation_deg,
            max_scale_delta: self.max_scale_delta,
            max_translation_vox: self.max_translation_vox,
            validity_threshold: self.validity_threshold,
            sentinel: self.sentinel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_width: usize,
    pub depth: usize,
    pub norm_kind: String,
    pub norm_affine: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = SegModelConfig::default();
        Self {
            base_width: m.base_width,
            depth: m.depth,
            norm_kind: "instance".into(),
            norm_affine: m.norm_affine,
        }
    }
}

impl ModelSection {
    pub fn norm_kind(&self) -> Result<NormKind> {
        match self.norm_kind.as_str() {
            "instance" => Ok(NormKind::Instance),
            "batch" => Ok(NormKind::Batch),
            other => Err(CoreError::Config(format!(
                "unknown norm_kind {other} (expected instance or batch)"
            ))),
        }
    }

    pub fn to_config(&self, in_channels: usize, num_classes: usize, seed: u64) -> Result<SegModelConfig> {
        Ok(SegModelConfig {
            in_channels,
            num_classes,
            base_width: self.base_width,
            depth: self.depth,
            norm_kind: self.norm_kind()?,
            norm_affine: self.norm_affine,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub pipeline: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub patches_per_volume: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub foreground_bias: f64,
    #[serde(default = "default_true")]
    pub znormalize: bool,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            pipeline: "plain".into(),
            epochs: p.epochs,
            batch_size: p.batch_size,
            patches_per_volume: p.patches_per_volume,
            patch_size: p.patch_size[0],
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            ce_weight: p.loss_weights.0,
            dice_weight: p.loss_weights.1,
            foreground_bias: p.foreground_bias,
            znormalize: p.znormalize,
            seed: p.seed,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self, gin: &GinSection, ssc: &SscSection) -> Result<PretrainConfig> {
        let pipeline: Pipeline = self.pipeline.parse()?;
        Ok(PretrainConfig {
            pipeline,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patches_per_volume: self.patches_per_volume,
            patch_size: [self.patch_size; 3],
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            loss_weights: (self.ce_weight, self.dice_weight),
            foreground_bias: self.foreground_bias,
            znormalize: self.znormalize,
            gin: gin.to_config(),
            ssc: ssc.to_config(),
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub num_steps: usize,
    pub patches_per_step: usize,
    pub loss_exponent: u32,
    pub stability_eps: f64,
    pub classes: Vec<usize>,
    pub param_group: String,
    pub ensemble_size: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for TtaSection {
    fn default() -> Self {
        let t = AdaptationConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            num_steps: t.num_steps,
            patches_per_step: t.patches_per_step,
            loss_exponent: t.loss_exponent,
            stability_eps: t.stability_eps,
            classes: t.class_subset.clone(),
            param_group: "all".into(),
            ensemble_size: t.ensemble_size,
            patch_size: t.patch_size[0],
            seed: t.seed,
        }
    }
}

impl TtaSection {
    pub fn to_config(&self, spatial: &SpatialSection) -> Result<AdaptationConfig> {
        let param_group: ParamGroup = self.param_group.parse()?;
        Ok(AdaptationConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            num_steps: self.num_steps,
            patches_per_step: self.patches_per_step,
            loss_exponent: self.loss_exponent,
            stability_eps: self.stability_eps,
            class_subset: self.classes.clone(),
            param_group,
            ensemble_size: self.ensemble_size,
            patch_size: [self.patch_size; 3],
            spatial: spatial.to_config(),
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub grid_size: usize,
    pub num_classes: usize,
    pub shapes_per_class: usize,
    pub num_samples: usize,
    pub spacing_mm: f64,
    pub class_intensities: Vec<f32>,
    pub domain_b_transfer: String,
    pub domain_b_gamma: f64,
    pub noise_sigma_a: f32,
    pub noise_sigma_b: f32,
    pub bias_strength_a: f32,
    pub bias_strength_b: f32,
    pub resolution_gap: bool,
    pub seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        Self {
            grid_size: p.grid_size,
            num_classes: p.num_classes,
            shapes_per_class: p.shapes_per_class,
            num_samples: p.num_samples,
            spacing_mm: p.spacing_mm,
            class_intensities: p.domain_a.class_intensity_map.clone(),
            domain_b_transfer: "inverted".into(),
            domain_b_gamma: 2.5,
            noise_sigma_a: p.domain_a.noise_sigma,
            noise_sigma_b: p.domain_b.noise_sigma,
            bias_strength_a: p.domain_a.bias_field_strength,
            bias_strength_b: p.domain_b.bias_field_strength,
            resolution_gap: p.resolution_gap,
            seed: p.seed,
        }
    }
}

impl PhantomSection {
    pub fn to_config(&self) -> Result<PhantomConfig> {
        let transfer = match self.domain_b_transfer.as_str() {
            "identity" => IntensityTransfer::Identity,
            "inverted" => IntensityTransfer::Inverted,
            "gamma" => IntensityTransfer::Gamma(self.domain_b_gamma),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown domain_b_transfer {other} (expected identity, inverted or gamma)"
                )))
            }
        };
        Ok(PhantomConfig {
            grid_size: self.grid_size,
            num_classes: self.num_classes,
            shapes_per_class: self.shapes_per_class,
            num_samples: self.num_samples,
            spacing_mm: self.spacing_mm,
            domain_a: IntensityDomain {
                class_intensity_map: self.class_intensities.clone(),
                intensity_transfer: IntensityTransfer::Identity,
                noise_sigma: self.noise_sigma_a,
                bias_field_strength: self.bias_strength_a,
            },
            domain_b: IntensityDomain {
                class_intensity_map: self.class_intensities.clone(),
                intensity_transfer: transfer,
                noise_sigma: self.noise_sigma_b,
                bias_field_strength: self.bias_strength_b,
            },
            resolution_gap: self.resolution_gap,
            seed: self.seed,
        })
    }
}

/// End-to-end scenario shape: which pipeline variants to train, how to split
/// the generated samples, and which volumes get adapted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub pipelines: Vec<String>,
    pub num_train: usize,
    pub num_test: usize,
    /// How many test volumes to adapt (TTA cost is per volume).
    pub tta_cases: usize,
    pub reference_method: String,
    pub seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            pipelines: vec!["plain".into(), "gin_ssc".into()],
            num_train: 40,
            num_test: 10,
            tta_cases: 3,
            reference_method: "plain".into(),
            seed: 0,
        }
    }
}
