//! Compact patch-based 3D encoder-decoder segmentation network.
//!
//! Encoder stages halve resolution and double width; decoder stages upsample,
//! concatenate the skip feature and fuse with two convolutions. Named
//! parameter groups (`norm` / `encoder` / `all`) support partial adaptation.

use ndarray::{concatenate, s, Axis};

use crate::error::{CoreError, Result};
use crate::nn::conv::Conv3d;
use crate::nn::norm::{Norm, NormCache, NormKind, RunMode};
use crate::nn::{
    fl, leaky_relu, leaky_relu_backward, softmax, upsample_nearest2, upsample_nearest2_backward,
    Elem, ParamView, Tensor,
};
use crate::rng::{derive_rng, Rng};
use crate::volume::{LabelMap, Volume};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of resolution levels; `depth - 1` downsampling steps.
    pub depth: usize,
    pub norm_kind: NormKind,
    pub norm_affine: bool,
    pub seed: u64,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_width: 16,
            depth: 4,
            norm_kind: NormKind::Instance,
            norm_affine: true,
            seed: 0,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.base_width == 0 || self.depth == 0
        {
            return Err(CoreError::Config(
                "in_channels, base_width, depth must be positive and num_classes >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Patch extent and sliding-window stride, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: [64; 3],
            stride: [32; 3],
        }
    }
}

impl PatchSpec {
    pub fn cubic(patch: usize, stride: usize) -> Self {
        Self {
            patch_size: [patch; 3],
            stride: [stride; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 || self.patch_size[a] == 0 {
                return Err(CoreError::invalid("patch size and stride must be positive"));
            }
            if self.stride[a] > self.patch_size[a] {
                return Err(CoreError::invalid(format!(
                    "stride {:?} exceeds patch size {:?}",
                    self.stride, self.patch_size
                )));
            }
        }
        Ok(())
    }
}

/// Two convolutions, each followed by normalization and a leaky rectifier.
#[derive(Debug, Clone)]
struct ConvBlock<F: Elem> {
    conv1: Conv3d<F>,
    norm1: Norm<F>,
    conv2: Conv3d<F>,
    norm2: Norm<F>,
}

struct BlockCache<F: Elem> {
    x: Tensor<F>,
    n1: NormCache<F>,
    h1: Tensor<F>,
    a1: Tensor<F>,
    n2: NormCache<F>,
    h2: Tensor<F>,
}

impl<F: Elem> ConvBlock<F> {
    fn init(c_in: usize, c_out: usize, down: bool, kind: NormKind, affine: bool, rng: &mut Rng) -> Self {
        let stride = if down { 2 } else { 1 };
        Self {
            conv1: Conv3d::init(c_in, c_out, 3, stride, rng),
            norm1: Norm::new(kind, c_out, affine),
            conv2: Conv3d::init(c_out, c_out, 3, 1, rng),
            norm2: Norm::new(kind, c_out, affine),
        }
    }

    fn forward(&mut self, x: &Tensor<F>, mode: RunMode) -> (Tensor<F>, BlockCache<F>) {
        let a0 = self.conv1.forward(x);
        let (h1, n1) = self.norm1.forward(&a0, mode);
        let a1 = leaky_relu(&h1, LEAKY_SLOPE);
        let a2 = self.conv2.forward(&a1);
        let (h2, n2) = self.norm2.forward(&a2, mode);
        let out = leaky_relu(&h2, LEAKY_SLOPE);
        (
            out,
            BlockCache {
                x: x.clone(),
                n1,
                h1,
                a1,
                n2,
                h2,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let g = leaky_relu_backward(&cache.h2, grad_out, LEAKY_SLOPE);
        let g = self.norm2.backward(&cache.n2, &g);
        let g = self.conv2.backward(&cache.a1, &g);
        let g = leaky_relu_backward(&cache.h1, &g, LEAKY_SLOPE);
        let g = self.norm1.backward(&cache.n1, &g);
        self.conv1.backward(&cache.x, &g)
    }

    fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.norm1.zero_grad();
        self.conv2.zero_grad();
        self.norm2.zero_grad();
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, F>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [F])) {
        for (norm, tag) in [(&mut self.norm1, "norm1"), (&mut self.norm2, "norm2")] {
            if norm.kind == NormKind::Batch {
                f(
                    format!("{prefix}.{tag}.running_mean"),
                    norm.running_mean.as_slice_mut().unwrap(),
                );
                f(
                    format!("{prefix}.{tag}.running_var"),
                    norm.running_var.as_slice_mut().unwrap(),
                );
            }
        }
    }
}

/// Patch-based 3D encoder-decoder with softmax class output.
#[derive(Debug, Clone)]
pub struct SegModel<F: Elem> {
    pub cfg: SegModelConfig,
    enc: Vec<ConvBlock<F>>,
    dec: Vec<ConvBlock<F>>,
    head: Conv3d<F>,
}

pub struct ModelCache<F: Elem> {
    enc_caches: Vec<BlockCache<F>>,
    dec_caches: Vec<Option<BlockCache<F>>>,
    head_in: Tensor<F>,
}

/// Which parameters an optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Norm,
    Encoder,
    All,
}

impl std::str::FromStr for ParamGroup {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(ParamGroup::Norm),
            "encoder" => Ok(ParamGroup::Encoder),
            "all" => Ok(ParamGroup::All),
            other => Err(CoreError::invalid(format!(
                "unknown parameter group {other} (expected norm, encoder or all)"
            ))),
        }
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParamGroup::Norm => "norm",
            ParamGroup::Encoder => "encoder",
            ParamGroup::All => "all",
        })
    }
}

fn in_group(group: ParamGroup, name: &str, is_norm: bool) -> bool {
    match group {
        ParamGroup::All => true,
        ParamGroup::Norm => is_norm,
        // The deepest encoder stage is the bottleneck and counts as encoder.
        ParamGroup::Encoder => name.starts_with("enc"),
    }
}

/// Names selected by [`SegModel::parameter_subset`], plus a warning when the
/// selection is empty.
#[derive(Debug, Clone)]
pub struct SubsetSelection {
    pub names: Vec<String>,
    pub warning: Option<String>,
}

impl<F: Elem> SegModel<F> {
    pub fn init(cfg: SegModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(cfg.seed, &[0x5e6]);
        let width = |l: usize| cfg.base_width << l;
        let mut enc = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let c_in = if l == 0 { cfg.in_channels } else { width(l - 1) };
            enc.push(ConvBlock::init(
                c_in,
                width(l),
                l > 0,
                cfg.norm_kind,
                cfg.norm_affine,
                &mut rng,
            ));
        }
        let mut dec = Vec::new();
        for l in 0..cfg.depth.saturating_sub(1) {
            // Decoder block at level l fuses up(width(l+1)) with skip width(l).
            dec.push(ConvBlock::init(
                width(l + 1) + width(l),
                width(l),
                false,
                cfg.norm_kind,
                cfg.norm_affine,
                &mut rng,
            ));
        }
        let head = Conv3d::init(cfg.base_width, cfg.num_classes, 1, 1, &mut rng);
        Ok(Self {
            cfg,
            enc,
            dec,
            head,
        })
    }

    /// Forward pass returning logits plus the cache for [`SegModel::backward`].
    pub fn forward_train(&mut self, x: &Tensor<F>, mode: RunMode) -> Result<(Tensor<F>, ModelCache<F>)> {
        if x.dim().1 != self.cfg.in_channels {
            return Err(CoreError::invalid(format!(
                "input has {} channels, model expects {}",
                x.dim().1,
                self.cfg.in_channels
            )));
        }
        let depth = self.cfg.depth;
        let mut enc_caches = Vec::with_capacity(depth);
        let mut enc_outs = Vec::with_capacity(depth);
        let mut feat = x.clone();
        for block in self.enc.iter_mut() {
            let (out, cache) = block.forward(&feat, mode);
            enc_caches.push(cache);
            enc_outs.push(out.clone());
            feat = out;
        }
        // feat now holds the bottleneck feature (deepest encoder output).
        let mut dec_caches: Vec<Option<BlockCache<F>>> = (0..depth.saturating_sub(1)).map(|_| None).collect();
        for l in (0..depth.saturating_sub(1)).rev() {
            let up = upsample_nearest2(&feat);
            let cat = concatenate(Axis(1), &[up.view(), enc_outs[l].view()])
                .expect("skip shapes align");
            let (out, cache) = self.dec[l].forward(&cat, mode);
            dec_caches[l] = Some(cache);
            feat = out;
        }
        let head_in = feat.clone();
        let logits = self.head.forward(&feat);
        Ok((
            logits,
            ModelCache {
                enc_caches,
                dec_caches,
                head_in,
            },
        ))
    }

    /// The spec-level forward: per-voxel class probabilities.
    pub fn forward_probs(&mut self, x: &Tensor<F>, mode: RunMode) -> Result<Tensor<F>> {
        let (logits, _) = self.forward_train(x, mode)?;
        Ok(softmax(&logits))
    }

    /// Backpropagates a logits gradient, accumulating parameter gradients;
    /// returns the input gradient.
    pub fn backward(&mut self, cache: &ModelCache<F>, grad_logits: &Tensor<F>) -> Tensor<F> {
        let depth = self.cfg.depth;
        let width = |l: usize| self.cfg.base_width << l;

        let g_head_in = self.head.backward(&cache.head_in, grad_logits);

        // Gradient buffers for each encoder output (skip + downstream paths).
        let mut grad_enc: Vec<Option<Tensor<F>>> = (0..depth).map(|_| None).collect();
        let add = |buf: &mut Option<Tensor<F>>, g: Tensor<F>| match buf {
            Some(acc) => *acc = &*acc + &g,
            None => *buf = Some(g),
        };

        let mut g_feat = g_head_in;
        // Decoder blocks were applied at levels depth-2 .. 0; reverse order.
        for l in 0..depth.saturating_sub(1) {
            let cache_l = cache.dec_caches[l].as_ref().expect("decoder cache");
            let g_cat = self.dec[l].backward(cache_l, &g_feat);
            let w_up = width(l + 1);
            let g_up = g_cat.slice(s![.., 0..w_up, .., .., ..]).to_owned();
            let g_skip = g_cat.slice(s![.., w_up.., .., .., ..]).to_owned();
            add(&mut grad_enc[l], g_skip);
            g_feat = upsample_nearest2_backward(&g_up);
        }
        add(&mut grad_enc[depth - 1], g_feat);

        let mut g_below: Option<Tensor<F>> = None;
        for l in (0..depth).rev() {
            let mut g = grad_enc[l].take().expect("encoder gradient");
            if let Some(extra) = g_below.take() {
                g = &g + &extra;
            }
            let g_in = self.enc[l].backward(&cache.enc_caches[l], &g);
            g_below = Some(g_in);
        }
        g_below.expect("input gradient")
    }

    pub fn zero_grad(&mut self) {
        for b in self.enc.iter_mut() {
            b.zero_grad();
        }
        for b in self.dec.iter_mut() {
            b.zero_grad();
        }
        self.head.zero_grad();
    }

    /// Visits every trainable parameter in a fixed deterministic order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.visit_params(&format!("enc{l}"), f);
        }
        for (l, b) in self.dec.iter_mut().enumerate() {
            b.visit_params(&format!("dec{l}"), f);
        }
        self.head.visit_params("head", f);
    }

    /// Visits non-trainable state (batch-norm running statistics).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(String, &mut [F])) {
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.visit_buffers(&format!("enc{l}"), f);
        }
        for (l, b) in self.dec.iter_mut().enumerate() {
            b.visit_buffers(&format!("dec{l}"), f);
        }
    }

    /// Visits only the parameters belonging to `group`.
    pub fn visit_params_in_group(
        &mut self,
        group: ParamGroup,
        f: &mut dyn FnMut(ParamView<'_, F>),
    ) {
        self.visit_params(&mut |view| {
            if in_group(group, &view.name, view.is_norm) {
                f(view);
            }
        });
    }

    /// Names of the parameters an optimizer would update for `group`.
    pub fn parameter_subset(&mut self, group: ParamGroup) -> SubsetSelection {
        let mut names = Vec::new();
        self.visit_params_in_group(group, &mut |view| names.push(view.name.clone()));
        let warning = if names.is_empty() {
            Some(format!(
                "parameter group `{group}` selects no parameters (norm_affine = {})",
                self.cfg.norm_affine
            ))
        } else {
            None
        };
        SubsetSelection { names, warning }
    }

    /// Total number of scalar parameters in `group`.
    pub fn count_params(&mut self, group: ParamGroup) -> usize {
        let mut count = 0usize;
        self.visit_params_in_group(group, &mut |view| count += view.value.len());
        count
    }

    /// Flattens parameters and buffers to `(name, shape-free data)` pairs in
    /// visitation order.
    pub fn state_entries(&mut self) -> Vec<(String, Vec<F>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |view| out.push((view.name.clone(), view.value.to_vec())));
        self.visit_buffers(&mut |name, data| out.push((name, data.to_vec())));
        out
    }

    /// Loads state produced by [`SegModel::state_entries`] on an identically
    /// configured model.
    pub fn load_state_entries(&mut self, entries: &[(String, Vec<F>)]) -> Result<()> {
        use std::collections::HashMap;
        let map: HashMap<&str, &Vec<F>> = entries.iter().map(|(n, d)| (n.as_str(), d)).collect();
        let mut missing = Vec::new();
        let mut mismatch = Vec::new();
        self.visit_params(&mut |view| match map.get(view.name.as_str()) {
            Some(data) if data.len() == view.value.len() => view.value.copy_from_slice(data),
            Some(_) => mismatch.push(view.name.clone()),
            None => missing.push(view.name.clone()),
        });
        self.visit_buffers(&mut |name, slot| match map.get(name.as_str()) {
            Some(data) if data.len() == slot.len() => slot.copy_from_slice(data),
            Some(_) => mismatch.push(name),
            None => missing.push(name),
        });
        if !missing.is_empty() || !mismatch.is_empty() {
            return Err(CoreError::format(format!(
                "checkpoint state mismatch; missing: {missing:?}, wrong size: {mismatch:?}"
            )));
        }
        Ok(())
    }
}

/// Converts a volume patch window into a batch-of-one network tensor.
fn patch_to_tensor<F: Elem>(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Tensor<F> {
    let c = v.channels();
    let mut t = Tensor::<F>::zeros((1, c, size[0], size[1], size[2]));
    for ci in 0..c {
        let ch = v.channel(ci);
        for z in 0..size[0] {
            for y in 0..size[1] {
                for x in 0..size[2] {
                    t[[0, ci, z, y, x]] =
                        fl::<F>(ch[[origin[0] + z, origin[1] + y, origin[2] + x]] as f64);
                }
            }
        }
    }
    t
}

/// Tiling origins along one axis: multiples of the stride plus a final
/// flush-right window so the whole extent is covered.
fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0usize;
    loop {
        if o + patch >= dim {
            origins.push(dim - patch);
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins.dedup();
    origins
}

/// Aggregates overlapping patch predictions with uniform weights into a
/// full-volume class-probability map.
pub fn sliding_window_predict<F: Elem>(
    model: &mut SegModel<F>,
    v: &Volume,
    spec: &PatchSpec,
) -> Result<Volume> {
    spec.validate()?;
    if v.channels() != model.cfg.in_channels {
        return Err(CoreError::invalid(format!(
            "volume has {} channels, model expects {}",
            v.channels(),
            model.cfg.in_channels
        )));
    }
    let shape = v.shape();
    for a in 0..3 {
        if shape[a] < spec.patch_size[a] {
            return Err(CoreError::invalid(format!(
                "volume shape {shape:?} is smaller than patch {:?}",
                spec.patch_size
            )));
        }
    }
    let k = model.cfg.num_classes;
    let mut sum = ndarray::Array4::<f64>::zeros((k, shape[0], shape[1], shape[2]));
    let mut count = ndarray::Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
    let oz = axis_origins(shape[0], spec.patch_size[0], spec.stride[0]);
    let oy = axis_origins(shape[1], spec.patch_size[1], spec.stride[1]);
    let ox = axis_origins(shape[2], spec.patch_size[2], spec.stride[2]);
    for &z0 in &oz {
        for &y0 in &oy {
            for &x0 in &ox {
                let t = patch_to_tensor::<F>(v, [z0, y0, x0], spec.patch_size);
                let probs = model.forward_probs(&t, RunMode::Infer)?;
                for ci in 0..k {
                    for z in 0..spec.patch_size[0] {
                        for y in 0..spec.patch_size[1] {
                            for x in 0..spec.patch_size[2] {
                                sum[[ci, z0 + z, y0 + y, x0 + x]] +=
                                    probs[[0, ci, z, y, x]].to_f64().unwrap();
                            }
                        }
                    }
                }
                for z in 0..spec.patch_size[0] {
                    for y in 0..spec.patch_size[1] {
                        for x in 0..spec.patch_size[2] {
                            count[[z0 + z, y0 + y, x0 + x]] += 1.0;
                        }
                    }
                }
            }
        }
    }
    let mut out = ndarray::Array4::<f32>::zeros((k, shape[0], shape[1], shape[2]));
    for ci in 0..k {
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    out[[ci, z, y, x]] = (sum[[ci, z, y, x]] / count[[z, y, x]]) as f32;
                }
            }
        }
    }
    Volume::new(out, v.spacing())
}

/// Per-voxel argmax of a class-probability volume.
pub fn argmax_labels(probs: &Volume) -> Result<LabelMap> {
    let k = probs.channels();
    if k < 2 {
        return Err(CoreError::invalid("probability volume needs >= 2 channels"));
    }
    let [nz, ny, nx] = probs.shape();
    let mut labels = ndarray::Array3::<u8>::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for c in 0..k {
                    let v = probs.channel(c)[[z, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                labels[[z, y, x]] = best as u8;
            }
        }
    }
    LabelMap::new(labels, k, probs.spacing())
}
