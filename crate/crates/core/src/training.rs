//! Losses, patch sampling, undersampling augmentation and the AdamW
//! training loop.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{mean_exam_dice, window_starts, EvalConfig};
use crate::kspace::{prepare_exam, ComplexVolume, PreparedExam, Timepoint};
use crate::models::{patch_tensor, Model, ModelVariant};
use crate::nn::{fft_channels, Graph, ParamStore, Real, Tensor};
use crate::phantom::Exam;
use crate::sampling::{apply_mask, random_mask, SamplingMask, SplitMix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub focal_gamma: f64,
    /// (background, lesion)
    pub class_weights: [f64; 2],
    pub aux_kspace_mse_weight: f64,
    /// Soft-Dice smoothing in numerator and denominator.
    pub dice_smooth: f64,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub early_stopping_patience: usize,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    /// Optimizer steps per epoch; defaults to one pass over all windows.
    pub steps_per_epoch: Option<usize>,
    pub patch_depth: usize,
    pub patch_stride: usize,
    pub positive_patch_fraction: f64,
    pub positive_patient_oversampling: usize,
    /// Add post1 - pre pseudo-volumes to the training windows.
    pub include_post1: bool,
    pub augmentation_probability: f64,
    /// `(R, cf)` choices for undersampling augmentation.
    pub augmentation_choices: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dice_weight: 0.7,
            focal_weight: 0.3,
            focal_gamma: 1.5,
            class_weights: [0.05, 0.95],
            aux_kspace_mse_weight: 0.5,
            dice_smooth: 1e-5,
            learning_rate: 3e-4,
            lr_min: 1e-6,
            weight_decay: 1e-2,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            max_epochs: 60,
            early_stopping_patience: 10,
            grad_clip_norm: 1.0,
            batch_size: 16,
            steps_per_epoch: None,
            patch_depth: 24,
            patch_stride: 16,
            positive_patch_fraction: 0.5,
            positive_patient_oversampling: 2,
            include_post1: true,
            augmentation_probability: 0.3,
            augmentation_choices: vec![(2.0, 0.04), (4.0, 0.08)],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 300 steps of batch 4 at a tenfold learning rate.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-3,
            max_epochs: 15,
            steps_per_epoch: Some(20),
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("dice_weight", self.dice_weight)?;
        unit("focal_weight", self.focal_weight)?;
        unit("class_weights[0]", self.class_weights[0])?;
        unit("class_weights[1]", self.class_weights[1])?;
        unit("aux_kspace_mse_weight", self.aux_kspace_mse_weight)?;
        unit("positive_patch_fraction", self.positive_patch_fraction)?;
        unit("augmentation_probability", self.augmentation_probability)?;
        if (self.dice_weight + self.focal_weight - 1.0).abs() > 1e-9 {
            return Err(Error::validation("dice_weight + focal_weight must equal 1"));
        }
        if self.batch_size == 0 || self.patch_depth == 0 || self.patch_stride == 0 {
            return Err(Error::validation("batch_size, patch_depth and patch_stride must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs must be at least 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.learning_rate) {
            return Err(Error::validation("need 0 <= lr_min <= learning_rate"));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::validation("grad_clip_norm must be positive"));
        }
        if self.positive_patient_oversampling == 0 {
            return Err(Error::validation("positive_patient_oversampling must be at least 1"));
        }
        if self.augmentation_probability > 0.0 && self.augmentation_choices.is_empty() {
            return Err(Error::validation("augmentation enabled without augmentation_choices"));
        }
        if let Some(c) = self.augmentation_choices.iter().find(|c| c.0 < 1.0 || !(0.0..=1.0).contains(&c.1)) {
            return Err(Error::validation(format!("invalid augmentation choice (R={}, cf={})", c.0, c.1)));
        }
        Ok(())
    }
}

/// Weighted loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `1 - mean soft Dice` (unweighted).
    pub dice: f64,
    /// Class-weighted focal loss (unweighted).
    pub focal: f64,
    /// Auxiliary k-space MSE (unweighted, 0 outside the native model).
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_terms(&self, cfg: &TrainConfig) -> [f64; 3] {
        [
            cfg.dice_weight * self.dice,
            cfg.focal_weight * self.focal,
            cfg.aux_kspace_mse_weight * self.aux,
        ]
    }
}

fn check_target<T: Real>(probs: &Tensor<T>, target: &[u8]) -> Result<()> {
    if probs.channels() != 2 || probs.voxels() != target.len() {
        return Err(Error::shape(format!(
            "probabilities {:?} do not match a 2-class target of {} voxels",
            probs.shape,
            target.len()
        )));
    }
    Ok(())
}

/// `1 - mean over classes of (2 I + eps) / (sum p + sum t + eps)` and its
/// gradient with respect to the probabilities.
pub fn soft_dice_loss<T: Real>(probs: &Tensor<T>, target: &[u8], eps: f64) -> Result<(f64, Tensor<T>)> {
    check_target(probs, target)?;
    let c = probs.channels();
    let mut grad = Tensor::zeros(probs.shape);
    let mut total = 0.0;
    for k in 0..c {
        let p = probs.channel(k);
        let (mut inter, mut sum) = (0.0, 0.0);
        for (&pv, &t) in p.iter().zip(target) {
            let tv = (((t != 0) as usize) == k) as u8 as f64;
            let pv = pv.to_f64().unwrap();
            inter += pv * tv;
            sum += pv + tv;
        }
        let den = sum + eps;
        let num = 2.0 * inter + eps;
        total += num / den;
        for (g, &t) in grad.channel_mut(k).iter_mut().zip(target) {
            let tv = (((t != 0) as usize) == k) as u8 as f64;
            *g = T::c(-(2.0 * tv * den - num) / (den * den) / c as f64);
        }
    }
    Ok((1.0 - total / c as f64, grad))
}

const FOCAL_FLOOR: f64 = 1e-8;

/// Mean over voxels of `-w_y (1 - p_y)^gamma log p_y`.
pub fn focal_loss<T: Real>(probs: &Tensor<T>, target: &[u8], gamma: f64, weights: [f64; 2]) -> Result<(f64, Tensor<T>)> {
    check_target(probs, target)?;
    let v = probs.voxels();
    let mut grad = Tensor::zeros(probs.shape);
    let mut total = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let y = (t != 0) as usize;
        let w = weights[y];
        let raw = probs.data[y * v + i].to_f64().unwrap();
        let p = raw.max(FOCAL_FLOOR);
        let q = 1.0 - p;
        total += -w * q.powf(gamma) * p.ln();
        if raw > FOCAL_FLOOR {
            let d = -w * (-gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p);
            grad.data[y * v + i] = T::c(d / v as f64);
        }
    }
    Ok((total / v as f64, grad))
}

/// Weighted Dice + focal loss and its gradient with respect to the
/// probabilities.
pub fn dice_focal_loss<T: Real>(probs: &Tensor<T>, target: &[u8], cfg: &TrainConfig) -> Result<(LossBreakdown, Tensor<T>)> {
    let (dice, mut g) = soft_dice_loss(probs, target, cfg.dice_smooth)?;
    let (focal, gf) = focal_loss(probs, target, cfg.focal_gamma, cfg.class_weights)?;
    let (a, b) = (T::c(cfg.dice_weight), T::c(cfg.focal_weight));
    for (x, &y) in g.data.iter_mut().zip(&gf.data) {
        *x = a * *x + b * y;
    }
    let total = cfg.dice_weight * dice + cfg.focal_weight * focal;
    Ok((
        LossBreakdown {
            dice,
            focal,
            aux: 0.0,
            total,
        },
        g,
    ))
}

/// `fft2c` of the one-hot target, laid out `[re_bg, re_lesion, im_bg, im_lesion]`.
pub fn kspace_target<T: Real>(target: &[u8], spatial: [usize; 3]) -> Tensor<T> {
    let n = target.len();
    let mut t = Tensor::zeros([4, spatial[0], spatial[1], spatial[2]]);
    for (i, &m) in target.iter().enumerate() {
        t.data[if m == 0 { i } else { n + i }] = T::one();
    }
    fft_channels(&t, false)
}

/// Sum over classes of the mean squared complex error against
/// [`kspace_target`], with its gradient.
pub fn kspace_mse_aux<T: Real>(variant: ModelVariant, predicted: &Tensor<T>, target: &[u8]) -> Result<(f64, Tensor<T>)> {
    if variant != ModelVariant::NativeKspace {
        return Err(Error::Usage(format!(
            "the auxiliary k-space loss applies to the native k-space model only, not {variant}"
        )));
    }
    if predicted.channels() != 4 || predicted.voxels() != target.len() {
        return Err(Error::shape(format!(
            "predicted k-space {:?} does not match a 2-class target of {} voxels",
            predicted.shape,
            target.len()
        )));
    }
    let tgt = kspace_target::<T>(target, predicted.spatial());
    let v = predicted.voxels() as f64;
    let mut grad = Tensor::zeros(predicted.shape);
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.data.iter_mut().zip(&predicted.data).zip(&tgt.data) {
        let r = (p - t).to_f64().unwrap();
        sum += r * r;
        *g = T::c(2.0 * r / v);
    }
    Ok((sum / v, grad))
}

/// Forward and backward for one sample: loss terms and parameter gradients.
pub fn sample_loss_grad<T: Real>(
    model: &Model<T>,
    patch: Tensor<T>,
    target: &[u8],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
    let mut g = Graph::new(&model.params);
    let nodes = model.forward_graph(&mut g, patch)?;
    let (mut loss, gp) = dice_focal_loss(g.value(nodes.probs), target, cfg)?;
    let mut seeds = vec![(nodes.probs, gp)];
    if let Some(k) = nodes.kspace {
        if cfg.aux_kspace_mse_weight > 0.0 {
            let (aux, mut ga) = kspace_mse_aux(model.variant(), g.value(k), target)?;
            ga.scale(T::c(cfg.aux_kspace_mse_weight));
            loss.aux = aux;
            loss.total += cfg.aux_kspace_mse_weight * aux;
            seeds.push((k, ga));
        }
    }
    let bw = g.backward(seeds);
    Ok((loss, bw.params))
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients whose global norm exceeds `max_norm`; returns the
/// norms before and after.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> (f64, f64) {
    let before = grad_norm(grads);
    if before > max_norm {
        let s = T::c(max_norm / (before + 1e-6));
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    (before, grad_norm(grads))
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at epoch `t_max`.
pub fn cosine_lr(epoch: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    let e = epoch.min(t_max) as f64;
    lr_min + (lr_max - lr_min) * (1.0 + (PI * e / t_max as f64).cos()) / 2.0
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            betas: cfg.adam_betas,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let [b1, b2] = self.betas;
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let decay = T::c(1.0 - lr * self.weight_decay);
        let (b1t, b2t) = (T::c(b1), T::c(b2));
        let (c1, c2) = (T::c(1.0 - b1), T::c(1.0 - b2));
        let step = T::c(lr / bc1);
        let bc2s = T::c(bc2.sqrt());
        let eps = T::c(self.eps);
        for (i, p) in params.params.iter_mut().enumerate() {
            for (((w, &g), m), v) in p.value.iter_mut().zip(&grads[i]).zip(&mut self.m[i]).zip(&mut self.v[i]) {
                *w *= decay;
                *m = b1t * *m + c1 * g;
                *v = b2t * *v + c2 * g * g;
                *w -= step * *m / (v.sqrt() / bc2s + eps);
            }
        }
    }
}

/// One training window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainItem {
    /// Index into the training volume list.
    pub volume: usize,
    pub z0: usize,
    pub positive: bool,
}

/// Draws windows so that about `positive_patch_fraction` of them contain
/// lesion voxels; windows of lesion-positive patients appear
/// `positive_patient_oversampling` times in their pool. With one pool
/// empty, draws fall back to the other.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    items: Vec<TrainItem>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    positive_fraction: f64,
}

impl PatchSampler {
    pub fn new(volumes: &[PreparedExam], cfg: &TrainConfig) -> Result<Self> {
        let mut s = Self {
            items: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
            positive_fraction: cfg.positive_patch_fraction,
        };
        for (vi, vol) in volumes.iter().enumerate() {
            let (d, h, w) = vol.shape();
            let plane = h * w;
            let mult = if vol.is_lesion_positive() {
                cfg.positive_patient_oversampling
            } else {
                1
            };
            for z0 in window_starts(d, cfg.patch_depth, cfg.patch_stride)? {
                let positive = vol.lesion_mask[z0 * plane..(z0 + cfg.patch_depth) * plane].iter().any(|&m| m != 0);
                let idx = s.items.len();
                s.items.push(TrainItem { volume: vi, z0, positive });
                let pool = if positive { &mut s.positives } else { &mut s.negatives };
                pool.extend(std::iter::repeat_n(idx, mult));
            }
        }
        if s.items.is_empty() {
            return Err(Error::validation("no training windows"));
        }
        Ok(s)
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn draw(&self, rng: &mut SplitMix64) -> TrainItem {
        let want_pos = rng.next_f64() < self.positive_fraction;
        let pool = match (want_pos, self.positives.is_empty(), self.negatives.is_empty()) {
            (true, false, _) | (false, false, true) => &self.positives,
            _ => &self.negatives,
        };
        let j = rng.next_range(0, pool.len() as u64 - 1) as usize;
        self.items[pool[j]]
    }
}

/// With the configured probability, applies a fresh random mask drawn
/// uniformly from the augmentation choices.
pub fn augment_undersample(patch: &ComplexVolume, cfg: &TrainConfig, rng: &mut SplitMix64) -> Result<(ComplexVolume, Option<SamplingMask>)> {
    if cfg.augmentation_choices.is_empty() || rng.next_f64() >= cfg.augmentation_probability {
        return Ok((patch.clone(), None));
    }
    let j = rng.next_range(0, cfg.augmentation_choices.len() as u64 - 1) as usize;
    let (r, cf) = cfg.augmentation_choices[j];
    let (_, _, w) = patch.shape();
    let mask = random_mask(w, r, cf, rng.next_u64());
    Ok((apply_mask(patch, &mask)?, Some(mask)))
}

/// Post2 - pre volumes (plus post1 - pre pseudo-volumes when enabled).
pub fn training_volumes(exams: &[Exam], cfg: &TrainConfig) -> Result<Vec<PreparedExam>> {
    let mut out = Vec::new();
    for e in exams {
        out.push(prepare_exam(e, Timepoint::Post2)?);
        if cfg.include_post1 {
            out.push(prepare_exam(e, Timepoint::Post1)?);
        }
    }
    Ok(out)
}

fn window_target(vol: &PreparedExam, z0: usize, depth: usize) -> Vec<u8> {
    let (_, h, w) = vol.shape();
    vol.lesion_mask[z0 * h * w..(z0 + depth) * h * w].to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
    /// Largest post-clip gradient norm of the epoch.
    pub max_clipped_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Per-step total loss.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_dice\n");
        for e in &self.epochs {
            let vd = e.val_dice.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, vd));
        }
        s
    }
}

/// Accumulates a batch of per-sample gradients, clips and applies one
/// optimizer step. Returns the mean loss and post-clip norm.
#[allow(clippy::too_many_arguments)]
fn optimize_batch<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: Vec<(Tensor<T>, Vec<u8>)>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(f64, f64)> {
    let n = batch.len();
    let mut acc = model.params.zeros_like();
    let mut loss = 0.0;
    for (patch, target) in batch {
        let (l, g) = sample_loss_grad(model, patch, &target, cfg)?;
        loss += l.total;
        for (a, gi) in acc.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(gi) {
                *x += y;
            }
        }
    }
    let inv = T::c(1.0 / n as f64);
    for v in acc.iter_mut().flat_map(|g| g.iter_mut()) {
        *v *= inv;
    }
    let (_, post) = clip_grad_norm(&mut acc, cfg.grad_clip_norm);
    opt.step(&mut model.params, &acc, lr);
    Ok((loss / n as f64, post))
}

fn check_disjoint(train: &[Exam], val: &[Exam]) -> Result<()> {
    let a: BTreeSet<usize> = train.iter().map(|e| e.patient_index).collect();
    let shared: Vec<usize> = val.iter().map(|e| e.patient_index).filter(|p| a.contains(p)).collect();
    if !shared.is_empty() {
        return Err(Error::validation(format!("patients {shared:?} appear in both training and validation sets")));
    }
    Ok(())
}

/// Trains `model` in place and restores the parameters of the epoch with
/// the best exam-level validation Dice.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_exams: &[Exam],
    val_exams: &[Exam],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    check_disjoint(train_exams, val_exams)?;
    let volumes = training_volumes(train_exams, cfg)?;
    let val: Vec<PreparedExam> = val_exams
        .iter()
        .map(|e| prepare_exam(e, Timepoint::Post2))
        .collect::<Result<_>>()?;
    let has_val = val.iter().any(|e| e.is_lesion_positive());
    let eval_cfg = EvalConfig {
        patch_depth: cfg.patch_depth,
        patch_stride: cfg.patch_stride,
        ..EvalConfig::default()
    };
    let sampler = PatchSampler::new(&volumes, cfg)?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| sampler.items().len().div_ceil(cfg.batch_size))
        .max(1);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut history = History::default();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.learning_rate, cfg.lr_min);
        let mut epoch_loss = 0.0;
        let mut max_norm: f64 = 0.0;
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let item = sampler.draw(&mut rng);
                let vol = &volumes[item.volume];
                let window = vol.kspace.depth_window(item.z0, cfg.patch_depth)?;
                let (window, _) = augment_undersample(&window, cfg, &mut rng)?;
                batch.push((patch_tensor(&window, 0, cfg.patch_depth)?, window_target(vol, item.z0, cfg.patch_depth)));
            }
            let (loss, norm) = optimize_batch(model, &mut opt, batch, cfg, lr)?;
            history.step_losses.push(loss);
            epoch_loss += loss;
            max_norm = max_norm.max(norm);
        }
        let val_dice = if has_val {
            Some(mean_exam_dice(model, &val, &eval_cfg)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / steps as f64,
            val_dice,
            max_clipped_norm: max_norm,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
        if let Some(d) = val_dice {
            if best.as_ref().is_none_or(|b| d > b.0) {
                best = Some((d, model.params.clone()));
                history.best_epoch = Some(epoch);
                history.best_val_dice = Some(d);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stopping_patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(history)
}

/// Outcome of [`overfit`].
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitResult {
    pub steps: usize,
    pub dice: f64,
    pub reached: bool,
}

/// Repeatedly fits every window of one exam (no augmentation, constant
/// learning rate) until its exam-level Dice reaches `target` or
/// `max_steps` optimizer steps have run.
pub fn overfit<T: Real>(
    model: &mut Model<T>,
    exam: &Exam,
    cfg: &TrainConfig,
    max_steps: usize,
    target: f64,
    check_every: usize,
) -> Result<OverfitResult> {
    cfg.validate()?;
    let vol = prepare_exam(exam, Timepoint::Post2)?;
    let eval_cfg = EvalConfig {
        patch_depth: cfg.patch_depth,
        patch_stride: cfg.patch_stride,
        ..EvalConfig::default()
    };
    let windows = window_starts(vol.shape().0, cfg.patch_depth, cfg.patch_stride)?;
    let batch: Vec<(Tensor<T>, Vec<u8>)> = windows
        .iter()
        .map(|&z| Ok((patch_tensor(&vol.kspace, z, cfg.patch_depth)?, window_target(&vol, z, cfg.patch_depth))))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(&model.params, cfg);
    let mut dice = 0.0;
    for step in 1..=max_steps {
        optimize_batch(model, &mut opt, batch.clone(), cfg, cfg.learning_rate)?;
        if step % check_every.max(1) == 0 || step == max_steps {
            dice = mean_exam_dice(model, std::slice::from_ref(&vol), &eval_cfg)?;
            if dice >= target {
                return Ok(OverfitResult {
                    steps: step,
                    dice,
                    reached: true,
                });
            }
        }
    }
    Ok(OverfitResult {
        steps: max_steps,
        dice,
        reached: false,
    })
}
