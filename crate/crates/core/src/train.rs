//! AdamW with decoupled weight decay, multistep schedule, and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Gradients, Mode, Tape};
use crate::error::{Error, Result};
use crate::mdd::FrameTriplet;
use crate::model::Model;
use crate::params::{Ctx, ParamStore};
use crate::supervision::{make_gt_heatmap, GroundTruthSpec};
use crate::synth::{LabeledFrame, Sequence};
use crate::tensor::Tensor4;

/// Ground-truth disk radius at 64×48.
pub const DEFAULT_GT_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    /// Distance between the start frames of consecutive training windows.
    pub window_stride: usize,
    pub gt_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 2,
            epochs: 30,
            milestones: vec![20, 25],
            gamma: 0.1,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip: None,
            window_stride: 1,
            gt_radius: DEFAULT_GT_RADIUS,
        }
    }
}

impl TrainConfig {
    /// Short schedule sized for a single CPU core on the synthetic benchmark.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 6,
            milestones: vec![4, 5],
            window_stride: 3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 || self.window_stride == 0 {
            return Err(Error::Config(
                "learning rate, batch size, epochs and window stride must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing: {:?}",
                self.milestones
            )));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::Config(format!(
                "milestones {:?} must be below the epoch count {}",
                self.milestones, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || self.clip.is_some_and(|c| !(c > 0.0)) || !(self.gt_radius > 0.0) {
            return Err(Error::Config("weight decay, clip and GT radius are out of range".into()));
        }
        Ok(())
    }
}

/// `lr · γ^k` where `k` counts milestones at or below `epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let k = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(cfg.lr * cfg.gamma.powi(k as i32))
}

/// First and second moment estimates per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor4>,
    pub v: Vec<Tensor4>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor4::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        let ps = store.params();
        self.m.len() == ps.len()
            && self.v.len() == ps.len()
            && ps
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// One AdamW update. Parameters flagged `decay = false` skip the decoupled decay term.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &Gradients,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Invalid("optimizer state does not match the parameter set".into()));
    }
    if grads.len() != store.params().len() {
        let missing: Vec<&str> = store
            .ids()
            .filter(|id| grads.get(*id).is_none())
            .map(|id| store.param(id).name.as_str())
            .collect();
        return Err(Error::Invalid(format!(
            "gradients cover {} of {} parameters (missing: {})",
            grads.len(),
            store.params().len(),
            missing.join(", ")
        )));
    }
    for (id, g) in grads.iter() {
        if id.0 >= store.params().len() {
            return Err(Error::UnknownNode(id.0));
        }
        let p = store.param(id);
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adamw", format!("gradient of {} is {:?}, expected {:?}", p.name, g.shape(), p.value.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter() {
        let i = id.0;
        let decay = if store.param(id).decay { cfg.weight_decay } else { 0.0 };
        let w = store.value_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *w);
        }
    }
    Ok(())
}

/// The three frames of the window starting at `start`.
pub fn window_triplet(seq: &Sequence, start: usize) -> Result<FrameTriplet> {
    let f = seq
        .frames
        .get(start..start + 3)
        .ok_or_else(|| Error::Dataset(format!("{}: window {start} past {} frames", seq.name, seq.len())))?;
    FrameTriplet::new(f[0].image.clone(), f[1].image.clone(), f[2].image.clone())
}

/// Ground-truth disk for one labelled frame at its own resolution.
pub fn frame_target(f: &LabeledFrame, radius: f64) -> Result<Tensor4> {
    let spec = if f.visible {
        GroundTruthSpec::visible(f.center.0, f.center.1, radius)
    } else {
        GroundTruthSpec::hidden(radius)
    };
    make_gt_heatmap(&spec, f.image.height(), f.image.width())
}

/// `(1, 3, H, W)` targets for the window starting at `start`.
pub fn window_targets(seq: &Sequence, start: usize, radius: f64) -> Result<Tensor4> {
    let maps = seq.frames[start..start + 3]
        .iter()
        .map(|f| frame_target(f, radius))
        .collect::<Result<Vec<_>>>()?;
    Tensor4::concat_channels(&maps.iter().collect::<Vec<_>>())
}

/// Mean loss of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,lr,loss\n");
    for r in log {
        s.push_str(&format!("{},{},{:e},{:.17e}\n", r.epoch, r.step, r.lr, r.loss));
    }
    s
}

/// Knobs for [`fit`] that are not part of the training recipe.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Stop after this many optimizer steps (across epochs).
    pub max_steps: Option<u64>,
    /// Called after every epoch with the model, optimizer state and log so far.
    pub on_epoch: Option<&'a mut dyn FnMut(&Model, &AdamState, &[LossRecord]) -> Result<()>>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(sequence, start)` pairs used for training.
pub fn training_windows(data: &[Sequence], stride: usize) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len().saturating_sub(2)).step_by(stride.max(1)).map(move |k| (s, k)))
        .collect()
}

/// Loss and gradients for one batch of windows. Batch-norm running statistics
/// are folded into the model's buffers.
pub fn train_step(
    model: &mut Model,
    data: &[Sequence],
    batch: &[(usize, usize)],
    radius: f64,
    mask_seed: u64,
) -> Result<(f64, Gradients)> {
    let triplets = batch
        .iter()
        .map(|&(s, k)| window_triplet(&data[s], k))
        .collect::<Result<Vec<_>>>()?;
    let targets = batch
        .iter()
        .map(|&(s, k)| window_targets(&data[s], k, radius))
        .collect::<Result<Vec<_>>>()?;
    let triplet = FrameTriplet::batch(&triplets.iter().collect::<Vec<_>>())?;
    let targets = Tensor4::concat_batch(&targets.iter().collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let (loss, updates) = {
        let mut ctx = Ctx::new(&mut tape, model.store(), Mode::Train);
        let (_, loss) = model.loss(&mut ctx, &triplet, &targets, mask_seed)?;
        (loss, std::mem::take(&mut ctx.bn_updates))
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Gradients::default()));
    }
    let grads = tape.backward(loss)?;
    model.store_mut().apply_bn_updates(&tape, &updates)?;
    Ok((value, grads))
}

/// Train `model` on `data`. Deterministic for a fixed configuration.
///
/// A non-finite loss restores the state saved at the end of the last
/// completed epoch and returns [`Error::Diverged`].
pub fn fit(
    model: &mut Model,
    state: &mut AdamState,
    data: &[Sequence],
    cfg: &TrainConfig,
    mut opts: FitOptions,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let mut windows = training_windows(data, cfg.window_stride);
    if windows.is_empty() {
        return Err(Error::Dataset("no training windows (need sequences of at least 3 frames)".into()));
    }
    if !state.matches(model.store()) {
        return Err(Error::Invalid("optimizer state does not match the model".into()));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut good = (model.store().clone(), state.clone());
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        windows.sort_unstable();
        windows.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, epoch as u64)));
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in windows.chunks(cfg.batch_size) {
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let mask_seed = mix(cfg.seed, 2, state.step);
            let (loss, mut grads) = train_step(model, data, batch, cfg.gt_radius, mask_seed)?;
            if !loss.is_finite() {
                *model.store_mut() = good.0;
                *state = good.1;
                return Err(Error::Diverged {
                    epoch,
                    step: state.step,
                });
            }
            if let Some(c) = cfg.clip {
                let norm = grads.squared_norm().sqrt();
                if norm > c {
                    grads.scale(c / norm);
                }
            }
            adamw_step(model.store_mut(), state, &grads, lr, cfg)?;
            total += loss;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        log.push(LossRecord {
            epoch,
            step: state.step,
            lr,
            loss: total / batches as f64,
        });
        good = (model.store().clone(), state.clone());
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(model, state, &log)?;
        }
    }
    Ok(log)
}
