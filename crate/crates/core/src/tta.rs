//! Source-free test-time adaptation via augmentation consistency.
//!
//! For one unlabeled target volume, each optimization step draws random
//! patches, pushes two differently warped copies of every patch through the
//! network, maps both predictions back through the inverse warps, masks
//! inversion artifacts and minimizes a Dice-style consistency loss between
//! the branches. Gradients accumulate over the patches of a step before the
//! optimizer moves (normalized by the patch count so the learning rate is
//! independent of it).

use ndarray::{Array3, Array4, Axis};

use crate::checkpoint::CheckpointManifest;
use crate::error::{CoreError, Result};
use crate::nn::norm::RunMode;
use crate::nn::optim::AdamW;
use crate::nn::{fl, softmax, softmax_backward, Elem, Tensor};
use crate::pipeline::prepare_inference_input;
use crate::pretrain::sample_patch_origin;
use crate::rng::derive_rng;
use crate::segnet::{argmax_labels, sliding_window_predict, ParamGroup, PatchSpec, SegModel};
use crate::spatial::{sample_affine, AffineAugmentation, SpatialConfig, WarpPlan};
use crate::ssc::ssc_descriptor;
use crate::volume::{LabelMap, Volume};

/// All TTA hyperparameters.
#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub num_steps: usize,
    pub patches_per_step: usize,
    pub loss_exponent: u32,
    pub stability_eps: f64,
    /// Label indices optimized for consistency.
    pub class_subset: Vec<usize>,
    pub param_group: ParamGroup,
    pub ensemble_size: usize,
    pub patch_size: [usize; 3],
    pub spatial: SpatialConfig,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.01,
            num_steps: 12,
            patches_per_step: 16,
            loss_exponent: 2,
            stability_eps: 1e-8,
            class_subset: vec![1],
            param_group: ParamGroup::All,
            ensemble_size: 3,
            patch_size: [64; 3],
            spatial: SpatialConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        if self.patches_per_step == 0 {
            return Err(CoreError::Config("patches_per_step must be >= 1".into()));
        }
        if !matches!(self.loss_exponent, 1 | 2) {
            return Err(CoreError::Config("loss exponent d must be 1 or 2".into()));
        }
        if self.ensemble_size == 0 {
            return Err(CoreError::Config("ensemble_size must be >= 1".into()));
        }
        if self.class_subset.is_empty() {
            return Err(CoreError::Config("class subset C must be non-empty".into()));
        }
        if let Some(&c) = self.class_subset.iter().find(|&&c| c >= num_classes) {
            return Err(CoreError::Config(format!(
                "class index {c} out of range for {num_classes} classes"
            )));
        }
        self.spatial.validate()
    }
}

/// Per-step record of the adaptation run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub loss: f64,
    pub patches_used: usize,
}

pub struct AdaptOutcome {
    pub model: SegModel<f32>,
    pub trace: Vec<StepTrace>,
}

/// Masked consistency Dice loss between two class-probability patches:
/// `1 - mean over classes in C of (sum 2 yA yB + e) / (sum yA^d + yB^d + e)`
/// with every sum running over masked voxels only.
pub fn consistency_dice_loss<F: Elem>(
    ya: &Array4<F>,
    yb: &Array4<F>,
    mask: &Array3<bool>,
    classes: &[usize],
    d: u32,
    e: f64,
) -> Result<f64> {
    let (loss, _) = consistency_loss_impl(ya, yb, mask, classes, d, e, false)?;
    Ok(loss)
}

/// As [`consistency_dice_loss`], also returning `dL/dyA` and `dL/dyB`
/// (exactly zero outside the mask and for classes not in `C`).
pub fn consistency_dice_loss_grad<F: Elem>(
    ya: &Array4<F>,
    yb: &Array4<F>,
    mask: &Array3<bool>,
    classes: &[usize],
    d: u32,
    e: f64,
) -> Result<(f64, Array4<F>, Array4<F>)> {
    let (loss, grads) = consistency_loss_impl(ya, yb, mask, classes, d, e, true)?;
    let (ga, gb) = grads.unwrap();
    Ok((loss, ga, gb))
}

type LossAndGrads<F> = (f64, Option<(Array4<F>, Array4<F>)>);

fn consistency_loss_impl<F: Elem>(
    ya: &Array4<F>,
    yb: &Array4<F>,
    mask: &Array3<bool>,
    classes: &[usize],
    d: u32,
    e: f64,
    want_grad: bool,
) -> Result<LossAndGrads<F>> {
    if ya.dim() != yb.dim() {
        return Err(CoreError::invalid(format!(
            "prediction shapes differ: {:?} vs {:?}",
            ya.dim(),
            yb.dim()
        )));
    }
    let (k, nz, ny, nx) = ya.dim();
    if mask.dim() != (nz, ny, nx) {
        return Err(CoreError::invalid(format!(
            "mask shape {:?} does not match predictions {:?}",
            mask.dim(),
            ya.dim()
        )));
    }
    if classes.is_empty() {
        return Err(CoreError::Config("class subset C must be non-empty".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(CoreError::Config(format!(
            "class index {c} out of range for {k} channels"
        )));
    }
    if !matches!(d, 1 | 2) {
        return Err(CoreError::Config("loss exponent d must be 1 or 2".into()));
    }
    let masked_count = mask.iter().filter(|&&m| m).count();
    if masked_count == 0 {
        return Err(CoreError::DegenerateInput(
            "consistency mask selects no voxels".into(),
        ));
    }

    // Masked probabilities must be valid; sentinel voxels never pass the mask.
    for &c in classes {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !mask[[z, y, x]] {
                        continue;
                    }
                    for field in [ya, yb] {
                        let v = field[[c, z, y, x]].to_f64().unwrap();
                        if !(-1e-5..=1.0 + 1e-5).contains(&v) {
                            return Err(CoreError::invalid(format!(
                                "masked probability {v} outside [0, 1] at class {c}"
                            )));
                        }
                    }
                }
            }
        }
    }

    let mut grads = want_grad.then(|| {
        (
            Array4::<F>::zeros(ya.raw_dim()),
            Array4::<F>::zeros(yb.raw_dim()),
        )
    });

    let mut term_sum = 0.0f64;
    for &c in classes {
        let mut num = e;
        let mut den = e;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !mask[[z, y, x]] {
                        continue;
                    }
                    let a = ya[[c, z, y, x]].to_f64().unwrap();
                    let b = yb[[c, z, y, x]].to_f64().unwrap();
                    num += 2.0 * a * b;
                    den += if d == 1 {
                        a + b
                    } else {
                        a * a + b * b
                    };
                }
            }
        }
        term_sum += num / den;
        if let Some((ga, gb)) = grads.as_mut() {
            // d(1 - mean term)/da = -(1/|C|) * (2b*den - num*d*a^(d-1)) / den^2
            let scale = -1.0 / classes.len() as f64;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if !mask[[z, y, x]] {
                            continue;
                        }
                        let a = ya[[c, z, y, x]].to_f64().unwrap();
                        let b = yb[[c, z, y, x]].to_f64().unwrap();
                        let (da, db) = if d == 1 {
                            (
                                (2.0 * b * den - num) / (den * den),
                                (2.0 * a * den - num) / (den * den),
                            )
                        } else {
                            (
                                (2.0 * b * den - num * 2.0 * a) / (den * den),
                                (2.0 * a * den - num * 2.0 * b) / (den * den),
                            )
                        };
                        ga[[c, z, y, x]] = fl::<F>(scale * da);
                        gb[[c, z, y, x]] = fl::<F>(scale * db);
                    }
                }
            }
        }
    }
    let loss = 1.0 - term_sum / classes.len() as f64;
    Ok((loss, grads))
}

/// One augmentation branch of a TTA patch after the forward pass and the
/// mapping back to patch orientation.
struct Branch<F: Elem> {
    cache: crate::segnet::ModelCache<F>,
    probs: Tensor<F>,
    /// Inverse-warped, renormalized class probabilities `(k, z, y, x)`.
    back: Array4<F>,
    /// Channel sums before renormalization (for the backward pass).
    back_sum: Array3<f64>,
    /// Round-tripped validity indicator.
    validity: Array3<f32>,
    plan_inv: WarpPlan,
}

fn run_branch<F: Elem>(
    model: &mut SegModel<F>,
    patch: &Volume,
    transform: &AffineAugmentation,
    manifest: &CheckpointManifest,
) -> Result<Branch<F>> {
    let shape = patch.shape();
    let plan_fwd = WarpPlan::build(transform, shape);
    let plan_inv = WarpPlan::build(&transform.inverse()?, shape);

    // Warp the raw intensity patch; the image fill is 0 (the mean of a
    // z-normalized volume), sentinel semantics only apply to predictions.
    let warped_img = plan_fwd.apply(&patch.scalar()?.to_owned(), 0.0);
    let validity_fwd = plan_fwd.apply(&Array3::ones(warped_img.dim()), 0.0);
    let warped = Volume::from_scalar(warped_img, patch.spacing())?;

    // Descriptor (if the checkpoint was trained on SSC input) is computed on
    // the warped image, matching the augment-then-describe training order.
    let net_in = if manifest.pipeline()?.uses_ssc() {
        ssc_descriptor(&warped, &manifest.ssc_config())?
    } else {
        warped
    };

    let (k_in, [nz, ny, nx]) = (net_in.channels(), net_in.shape());
    let mut x = Tensor::<F>::zeros((1, k_in, nz, ny, nx));
    for c in 0..k_in {
        let ch = net_in.channel(c);
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    x[[0, c, z, y, xx]] = fl::<F>(ch[[z, y, xx]] as f64);
                }
            }
        }
    }

    let (logits, cache) = model.forward_train(&x, RunMode::Train)?;
    let probs = softmax(&logits);
    let k = model.cfg.num_classes;

    // Inverse-warp every class channel (sentinel fill) and the validity.
    let sentinel = transform.sentinel;
    let mut back_raw = Array4::<F>::zeros((k, nz, ny, nx));
    for c in 0..k {
        let field = Array3::from_shape_fn((nz, ny, nx), |(z, y, xx)| {
            probs[[0, c, z, y, xx]].to_f64().unwrap() as f32
        });
        let warped_back = plan_inv.apply(&field, sentinel);
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    back_raw[[c, z, y, xx]] = fl::<F>(warped_back[[z, y, xx]] as f64);
                }
            }
        }
    }
    let validity = plan_inv.apply(&validity_fwd, 0.0);

    // Channel renormalization on valid voxels (sums are ~1 there); voxels
    // with degenerate sums are left untouched and are masked out anyway.
    let mut back = back_raw.clone();
    let mut back_sum = Array3::<f64>::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for xx in 0..nx {
                let s: f64 = (0..k).map(|c| back_raw[[c, z, y, xx]].to_f64().unwrap()).sum();
                back_sum[[z, y, xx]] = s;
                if s > 0.5 {
                    for c in 0..k {
                        back[[c, z, y, xx]] = fl::<F>(back_raw[[c, z, y, xx]].to_f64().unwrap() / s);
                    }
                }
            }
        }
    }

    Ok(Branch {
        cache,
        probs,
        back,
        back_sum,
        validity,
        plan_inv,
    })
}

/// Backpropagates `dL/d(back)` through renormalization, the inverse warp and
/// softmax into the model parameters. `scale` divides the contribution (the
/// 1/N_p gradient accumulation factor); classes outside `C` get exactly zero
/// logit gradient.
fn backprop_branch<F: Elem>(
    model: &mut SegModel<F>,
    branch: &Branch<F>,
    grad_back: &Array4<F>,
    classes: &[usize],
    scale: f64,
) {
    let (k, nz, ny, nx) = grad_back.dim();

    // Renormalization backward: p' = p / s with s the channel sum.
    let mut grad_raw = Array4::<F>::zeros(grad_back.raw_dim());
    for z in 0..nz {
        for y in 0..ny {
            for xx in 0..nx {
                let s = branch.back_sum[[z, y, xx]];
                if s > 0.5 {
                    let mut dot = 0.0f64;
                    for c in 0..k {
                        dot += grad_back[[c, z, y, xx]].to_f64().unwrap()
                            * branch.back[[c, z, y, xx]].to_f64().unwrap();
                    }
                    for c in 0..k {
                        let g = grad_back[[c, z, y, xx]].to_f64().unwrap();
                        grad_raw[[c, z, y, xx]] = fl::<F>((g - dot) / s);
                    }
                } else {
                    for c in 0..k {
                        grad_raw[[c, z, y, xx]] = grad_back[[c, z, y, xx]];
                    }
                }
            }
        }
    }

    // Inverse-warp adjoint: scatter back into patch-output space.
    let mut grad_probs = Tensor::<F>::zeros(branch.probs.raw_dim());
    for c in 0..k {
        let g = Array3::from_shape_fn((nz, ny, nx), |(z, y, xx)| {
            grad_raw[[c, z, y, xx]].to_f64().unwrap()
        });
        let scattered = branch.plan_inv.scatter_adjoint(&g);
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    grad_probs[[0, c, z, y, xx]] = fl::<F>(scattered[[z, y, xx]]);
                }
            }
        }
    }

    let mut grad_logits = softmax_backward(&branch.probs, &grad_probs);
    // Only the classes of interest are optimized: freeze all other logits.
    let in_subset: Vec<bool> = (0..k).map(|c| classes.contains(&c)).collect();
    for c in 0..k {
        if !in_subset[c] {
            grad_logits
                .index_axis_mut(Axis(1), c)
                .fill(F::zero());
        }
    }
    let s = fl::<F>(scale);
    grad_logits.mapv_inplace(|v| v * s);
    model.backward(&branch.cache, &grad_logits);
}

/// Foreground voxels of the unadapted model's own prediction, used as the
/// oversampling proxy (no labels exist at test time).
fn foreground_proxy(
    model: &mut SegModel<f32>,
    prepared: &Volume,
    patch_size: [usize; 3],
) -> Result<Vec<[usize; 3]>> {
    let spec = PatchSpec {
        patch_size,
        stride: patch_size,
    };
    let probs = sliding_window_predict(model, prepared, &spec)?;
    let labels = argmax_labels(&probs)?;
    let mut fg = Vec::new();
    for (idx, &l) in labels.labels().indexed_iter() {
        if l != 0 {
            fg.push([idx.0, idx.1, idx.2]);
        }
    }
    Ok(fg)
}

/// Adapts a pre-trained model to a single unlabeled target volume.
///
/// The returned model carries the adapted parameters (and, for batch-norm
/// models, running statistics drifted toward the target domain); the trace
/// holds one mean-loss entry per optimizer step.
pub fn adapt(
    model: &SegModel<f32>,
    manifest: &CheckpointManifest,
    target: &Volume,
    cfg: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    cfg.validate(model.cfg.num_classes)?;
    if target.channels() != 1 {
        return Err(CoreError::invalid("TTA target must be single-channel"));
    }
    let shape = target.shape();
    for a in 0..3 {
        if shape[a] < cfg.patch_size[a] {
            return Err(CoreError::invalid(format!(
                "target shape {shape:?} smaller than TTA patch {:?}",
                cfg.patch_size
            )));
        }
    }

    let mut adapted = model.clone();
    let znormed = if manifest.znormalize {
        target.znormalize()
    } else {
        target.clone()
    };

    // Foreground proxy from the unadapted model (2:1 oversampling).
    let prepared_full = prepare_inference_input(
        target,
        manifest.pipeline()?,
        manifest.znormalize,
        &manifest.ssc_config(),
    )?;
    let fg = foreground_proxy(&mut adapted, &prepared_full, cfg.patch_size)?;

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.num_steps);

    for step in 0..cfg.num_steps {
        adapted.zero_grad();
        let mut loss_sum = 0.0f64;
        let mut patches_used = 0usize;
        let grad_scale = 1.0 / cfg.patches_per_step as f64;

        for p in 0..cfg.patches_per_step {
            let mut rng = derive_rng(cfg.seed, &[11, step as u64, p as u64]);
            let origin = sample_patch_origin(shape, cfg.patch_size, &fg, 2.0 / 3.0, &mut rng);
            let patch = znormed.crop(origin, cfg.patch_size)?;

            let ta = sample_affine(&cfg.spatial, &mut rng)?;
            let tb = sample_affine(&cfg.spatial, &mut rng)?;
            let branch_a = run_branch(&mut adapted, &patch, &ta, manifest)?;
            let branch_b = run_branch(&mut adapted, &patch, &tb, manifest)?;

            let thr = cfg.spatial.validity_threshold as f32;
            let mask = ndarray::Zip::from(&branch_a.validity)
                .and(&branch_b.validity)
                .map_collect(|&va, &vb| va >= thr && vb >= thr);

            match consistency_dice_loss_grad(
                &branch_a.back,
                &branch_b.back,
                &mask,
                &cfg.class_subset,
                cfg.loss_exponent,
                cfg.stability_eps,
            ) {
                Ok((loss, ga, gb)) => {
                    if !loss.is_finite() {
                        return Err(CoreError::Numerical(format!(
                            "non-finite consistency loss at step {step}"
                        )));
                    }
                    backprop_branch(&mut adapted, &branch_a, &ga, &cfg.class_subset, grad_scale);
                    backprop_branch(&mut adapted, &branch_b, &gb, &cfg.class_subset, grad_scale);
                    loss_sum += loss;
                    patches_used += 1;
                }
                Err(CoreError::DegenerateInput(_)) => continue,
                Err(e) => return Err(e),
            }
        }

        if patches_used == 0 {
            return Err(CoreError::DegenerateInput(format!(
                "every patch of step {step} had an empty consistency overlap"
            )));
        }

        opt.begin_step();
        adapted.visit_params_in_group(cfg.param_group, &mut |mut view| opt.update(&mut view));
        trace.push(StepTrace {
            step,
            loss: loss_sum / patches_used as f64,
            patches_used,
        });
    }

    Ok(AdaptOutcome {
        model: adapted,
        trace,
    })
}

/// Adapts an ensemble: members differ only in their augmentation seeds
/// (`seed`, `seed + 1`, ...).
pub fn adapt_ensemble(
    model: &SegModel<f32>,
    manifest: &CheckpointManifest,
    target: &Volume,
    cfg: &AdaptationConfig,
) -> Result<Vec<AdaptOutcome>> {
    let mut outcomes = Vec::with_capacity(cfg.ensemble_size);
    for member in 0..cfg.ensemble_size {
        let member_cfg = AdaptationConfig {
            seed: cfg.seed + member as u64,
            ..cfg.clone()
        };
        outcomes.push(adapt(model, manifest, target, &member_cfg)?);
    }
    Ok(outcomes)
}

/// Averages class-probability volumes (uniform weights).
pub fn average_probabilities(maps: &[Volume]) -> Result<Volume> {
    let first = maps
        .first()
        .ok_or_else(|| CoreError::invalid("cannot average zero probability maps"))?;
    let mut acc = first.data().mapv(|v| v as f64);
    for m in &maps[1..] {
        if m.data().raw_dim() != first.data().raw_dim() {
            return Err(CoreError::invalid("probability map shapes differ"));
        }
        acc = acc + m.data().mapv(|v| v as f64);
    }
    let n = maps.len() as f64;
    Volume::new(acc.mapv(|v| (v / n) as f32), first.spacing())
}

/// Ensemble inference: mean softmax map over the members, then argmax.
pub fn ensemble_predict(
    models: &mut [SegModel<f32>],
    manifests: &[CheckpointManifest],
    v: &Volume,
    spec: &PatchSpec,
) -> Result<LabelMap> {
    if models.is_empty() || models.len() != manifests.len() {
        return Err(CoreError::Config(
            "ensemble needs one manifest per model".into(),
        ));
    }
    for m in &manifests[1..] {
        if !manifests[0].compatible_with(m) {
            return Err(CoreError::Config(
                "ensemble manifests are heterogeneous".into(),
            ));
        }
    }
    let prepared = prepare_inference_input(
        v,
        manifests[0].pipeline()?,
        manifests[0].znormalize,
        &manifests[0].ssc_config(),
    )?;
    let mut maps = Vec::with_capacity(models.len());
    for model in models.iter_mut() {
        maps.push(sliding_window_predict(model, &prepared, spec)?);
    }
    argmax_labels(&average_probabilities(&maps)?)
}

/// Tent baseline configuration.
#[derive(Debug, Clone)]
pub struct TentConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub patch_size: [usize; 3],
    pub patches_per_step: usize,
    pub seed: u64,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            learning_rate: 1e-3,
            patch_size: [64; 3],
            patches_per_step: 4,
            seed: 0,
        }
    }
}

/// Tent baseline: minimizes mean per-voxel prediction entropy over target
/// patches, updating only normalization affine parameters (plain gradient
/// descent). Returns the adapted model and the per-step entropy trace
/// (measured before each update).
pub fn tent_adapt(
    model: &SegModel<f32>,
    manifest: &CheckpointManifest,
    target: &Volume,
    cfg: &TentConfig,
) -> Result<(SegModel<f32>, Vec<f64>)> {
    let mut adapted = model.clone();
    let norm_params = adapted.parameter_subset(ParamGroup::Norm);
    if norm_params.names.is_empty() {
        return Err(CoreError::Config(
            "tent requires normalization affine parameters".into(),
        ));
    }

    let prepared = prepare_inference_input(
        target,
        manifest.pipeline()?,
        manifest.znormalize,
        &manifest.ssc_config(),
    )?;
    let shape = prepared.shape();
    for a in 0..3 {
        if shape[a] < cfg.patch_size[a] {
            return Err(CoreError::invalid(format!(
                "target shape {shape:?} smaller than tent patch {:?}",
                cfg.patch_size
            )));
        }
    }

    let k = adapted.cfg.num_classes;
    let mut entropy_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adapted.zero_grad();
        let mut entropy_sum = 0.0f64;
        for p in 0..cfg.patches_per_step {
            let mut rng = derive_rng(cfg.seed, &[13, step as u64, p as u64]);
            let origin = sample_patch_origin(shape, cfg.patch_size, &[], 0.0, &mut rng);
            let patch = prepared.crop(origin, cfg.patch_size)?;
            let [nz, ny, nx] = patch.shape();
            let mut x = Tensor::<f32>::zeros((1, patch.channels(), nz, ny, nx));
            for c in 0..patch.channels() {
                let ch = patch.channel(c);
                for z in 0..nz {
                    for y in 0..ny {
                        for xx in 0..nx {
                            x[[0, c, z, y, xx]] = ch[[z, y, xx]];
                        }
                    }
                }
            }
            let (logits, cache) = adapted.forward_train(&x, RunMode::Train)?;
            let probs = softmax(&logits);

            // Mean entropy and its logit gradient:
            // dH/dz_c = -p_c (ln p_c + H_voxel) / voxels.
            let voxels = (nz * ny * nx) as f64;
            let scale = 1.0 / (voxels * cfg.patches_per_step as f64);
            let mut grad_logits = Tensor::<f32>::zeros(logits.raw_dim());
            for z in 0..nz {
                for y in 0..ny {
                    for xx in 0..nx {
                        let mut h = 0.0f64;
                        for c in 0..k {
                            let pv = probs[[0, c, z, y, xx]] as f64;
                            if pv > 0.0 {
                                h -= pv * pv.ln();
                            }
                        }
                        entropy_sum += h / voxels;
                        for c in 0..k {
                            let pv = probs[[0, c, z, y, xx]] as f64;
                            let g = if pv > 0.0 {
                                -pv * (pv.ln() + h)
                            } else {
                                0.0
                            };
                            grad_logits[[0, c, z, y, xx]] = (g * scale) as f32;
                        }
                    }
                }
            }
            adapted.backward(&cache, &grad_logits);
        }
        entropy_trace.push(entropy_sum / cfg.patches_per_step as f64);

        let lr = cfg.learning_rate as f32;
        adapted.visit_params_in_group(ParamGroup::Norm, &mut |view| {
            for (w, g) in view.value.iter_mut().zip(view.grad.iter()) {
                *w -= lr * *g;
            }
        });
    }
    Ok((adapted, entropy_trace))
}
