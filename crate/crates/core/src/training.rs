//! Training loops: pretraining the forward image-to-video denoiser, and the
//! lightweight backward-motion fine-tuning that adapts a copy of it to
//! time-reversed video using rotated attention maps from the frozen original.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{encode, encode_frame, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Grads};
use crate::schedule::{corrupt, v_target_with_mode, NoiseSchedule, ScheduleFamily, VTargetMode};
use crate::temporal::{flip_time, rotate_set, LayerId};
use crate::unet::{AttentionPlan, Conditioning, DenoiserModel, TrainablePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub v_target_mode: VTargetMode,
    pub policy: TrainablePolicy,
    /// Linear learning-rate warmup length, in optimizer steps.
    pub warmup: usize,
    /// After warmup the learning rate follows a half cosine from `lr` down to
    /// `lr * final_lr_ratio`; 1 keeps it constant.
    pub final_lr_ratio: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

impl TrainConfig {
    /// Defaults for the backward fine-tuning stage.
    pub fn finetune() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            batch_size: 4,
            iterations: 2000,
            seed: 0,
            v_target_mode: VTargetMode::Clean,
            policy: TrainablePolicy::TemporalVoOnly,
            warmup: 0,
            final_lr_ratio: 1.0,
            grad_clip: None,
        }
    }

    /// Defaults for forward pretraining from scratch.
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            policy: TrainablePolicy::All,
            iterations: 5000,
            warmup: 100,
            final_lr_ratio: 0.05,
            grad_clip: Some(1.0),
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::Config("final_lr_ratio must lie in [0, 1]".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.iterations.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let r = self.final_lr_ratio;
        self.lr * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// How the backward model is fine-tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    /// Rotated forward maps injected; only value/output projections train.
    Full,
    /// No injection; all four projections train.
    WoRa,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Full => "full",
            FinetuneMode::WoRa => "wo_ra",
        }
    }

    pub fn default_policy(self) -> TrainablePolicy {
        match self {
            FinetuneMode::Full => TrainablePolicy::TemporalVoOnly,
            FinetuneMode::WoRa => TrainablePolicy::TemporalQkvoOnly,
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FinetuneMode::Full),
            "wo_ra" | "wo-ra" => Ok(FinetuneMode::WoRa),
            _ => Err(Error::Config(format!("unknown fine-tuning mode '{s}'"))),
        }
    }
}

/// Mean mini-batch loss per optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub losses: Vec<f64>,
}

impl LossLog {
    /// Mean of the window of `width` losses starting at `start`.
    pub fn window_mean(&self, start: usize, width: usize) -> f64 {
        let end = (start + width).min(self.losses.len());
        let s = &self.losses[start.min(end)..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    pub fn initial_smoothed(&self, width: usize) -> f64 {
        self.window_mean(0, width)
    }

    pub fn final_smoothed(&self, width: usize) -> f64 {
        self.window_mean(self.losses.len().saturating_sub(width), width)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{}\t{l:.8}", i + 1);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DenoiserModel,
    pub log: LossLog,
    /// Layers that ran on injected attention maps at any training step.
    pub injected: BTreeSet<LayerId>,
}

/// One sampled training example: clean latent, noise, and timestep.
struct Draw {
    clip: usize,
    t: usize,
    eps: Array4<f32>,
}

fn draw(rng: &mut ChaCha8Rng, data: &[VideoClip], steps: usize) -> Draw {
    let clip = rng.random_range(0..data.len());
    let t = rng.random_range(1..=steps);
    let (n, c, h, w) = data[clip].shape();
    let eps = Array4::from_shape_simple_fn((n, c, h, w), || rng.sample::<f32, _>(StandardNormal));
    Draw { clip, t, eps }
}

fn check_data(data: &[VideoClip], model: &DenoiserModel) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::Argument("training set is empty".into()))?;
    let shape = first.shape();
    if data.iter().any(|c| c.shape() != shape) {
        return Err(Error::Argument("clips in a training set must share one shape".into()));
    }
    if shape.0 > model.config().frames {
        return Err(Error::Argument(format!(
            "clips have {} frames but the model supports {}",
            shape.0,
            model.config().frames
        )));
    }
    Ok(())
}

/// Squared error and its gradient `d/dv mean((v - y)^2) * scale`.
fn mse_grad(v: &Array4<f32>, y: &Array4<f32>, scale: f32) -> (f64, Array4<f32>) {
    let n = v.len() as f64;
    let loss = v
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n;
    let k = 2.0 * scale / n as f32;
    let dv = ndarray::Zip::from(v).and(y).map_collect(|&a, &b| k * (a - b));
    (loss, dv)
}

fn optimizer_step(
    model: &mut DenoiserModel,
    opt: &mut AdamW<f32>,
    grads: &Grads<f32>,
    cfg: &TrainConfig,
    step: usize,
) {
    let mut grads = grads.clone();
    if let Some(max) = cfg.grad_clip {
        let norm = grads.global_norm();
        if norm > max {
            grads.scale((max / norm) as f32);
        }
    }
    opt.set_lr(cfg.lr_at(step));
    opt.step(&mut model.params, &grads);
}

fn diverged(step: usize, loss: f64) -> Error {
    log::error!("training diverged at step {step} (loss {loss})");
    Error::Numeric {
        location: format!("training step {step} (loss {loss})"),
    }
}

fn schedule_for(model: &DenoiserModel) -> Result<NoiseSchedule> {
    NoiseSchedule::new(model.config().timesteps, ScheduleFamily::Cosine)
}

/// Trains `init` as a forward image-to-video denoiser: v-prediction MSE with
/// the first frame of each clip as conditioning.
pub fn pretrain_forward(init: DenoiserModel, data: &[VideoClip], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if cfg.policy != TrainablePolicy::All {
        return Err(Error::Config(format!(
            "pretraining trains every parameter; policy '{}' is not allowed",
            cfg.policy
        )));
    }
    let mut model = init;
    check_data(data, &model)?;
    model.set_trainable(TrainablePolicy::All);
    let sched = schedule_for(&model)?;
    let latents: Vec<Array4<f32>> = data.iter().map(|c| encode(c.frames())).collect();
    let conds: Vec<Conditioning<f32>> = data
        .iter()
        .map(|c| Conditioning::new(encode_frame(&c.frame(0))))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), &model.params);
    let mut log = LossLog::default();
    let mut injected = BTreeSet::new();
    let plan = AttentionPlan::compute();
    let scale = 1.0 / cfg.batch_size as f32;

    for step in 0..cfg.iterations {
        let mut grads = Grads::for_store(&model.params);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let d = draw(&mut rng, data, sched.steps());
            let z = &latents[d.clip];
            let z_t = corrupt(z, d.t, &d.eps, &sched)?;
            let y = v_target_with_mode(z, &d.eps, d.t, &sched, cfg.v_target_mode)?;
            let (out, tape) = model.forward_with_tape(&z_t, d.t, &conds[d.clip], &plan)?;
            let (l, dv) = mse_grad(&out.v, &y, scale);
            loss += l * scale as f64;
            injected.extend(out.injected.iter().copied());
            model.backward(&tape, &dv, &mut grads);
        }
        if !loss.is_finite() {
            return Err(diverged(step + 1, loss));
        }
        optimizer_step(&mut model, &mut opt, &grads, cfg, step);
        log.losses.push(loss);
        if (step + 1) % 100 == 0 {
            log::info!("pretrain step {}: loss {:.5}", step + 1, log.final_smoothed(100));
        }
    }
    Ok(Trained { model, log, injected })
}

/// Fine-tunes a copy of `forward` to denoise time-reversed clips conditioned
/// on their last frame. In [`FinetuneMode::Full`] the rotated attention logits
/// of the frozen forward model, computed on the unflipped latent, replace the
/// backward model's own; `forward` is only read.
pub fn finetune_backward(
    forward: &DenoiserModel,
    data: &[VideoClip],
    mode: FinetuneMode,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    match (mode, cfg.policy) {
        (FinetuneMode::Full, TrainablePolicy::TemporalVoOnly) | (FinetuneMode::WoRa, TrainablePolicy::TemporalQkvoOnly) => {}
        (FinetuneMode::WoRa, TrainablePolicy::TemporalVoOnly) => {
            return Err(Error::Config(
                "temporal_vo_only requires injected attention maps; use mode full".into(),
            ))
        }
        (mode, policy) => {
            return Err(Error::Config(format!(
                "policy '{policy}' does not match fine-tuning mode '{mode}'"
            )))
        }
    }
    check_data(data, forward)?;
    let mut model = forward.clone();
    model.set_trainable(cfg.policy);
    let sched = schedule_for(&model)?;
    let latents: Vec<Array4<f32>> = data.iter().map(|c| encode(c.frames())).collect();
    let first: Vec<Conditioning<f32>> = data
        .iter()
        .map(|c| Conditioning::new(encode_frame(&c.frame(0))))
        .collect();
    let last: Vec<Conditioning<f32>> = data
        .iter()
        .map(|c| Conditioning::new(encode_frame(&c.frame(c.frame_count() - 1))))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), &model.params);
    let mut log = LossLog::default();
    let mut injected = BTreeSet::new();
    let scale = 1.0 / cfg.batch_size as f32;

    for step in 0..cfg.iterations {
        let mut grads = Grads::for_store(&model.params);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let d = draw(&mut rng, data, sched.steps());
            let z = &latents[d.clip];
            let z_t = corrupt(z, d.t, &d.eps, &sched)?;
            let plan = match mode {
                FinetuneMode::Full => {
                    let maps = forward
                        .forward(&z_t, d.t, &first[d.clip], &AttentionPlan::extract())?
                        .maps
                        .expect("extraction requested");
                    AttentionPlan::inject(rotate_set(&maps))
                }
                FinetuneMode::WoRa => AttentionPlan::compute(),
            };
            let z_flip = flip_time(&z_t, 0)?;
            let y = backward_target(z, &d.eps, d.t, &sched, cfg.v_target_mode)?;
            let (out, tape) = model.forward_with_tape(&z_flip, d.t, &last[d.clip], &plan)?;
            let (l, dv) = mse_grad(&out.v, &y, scale);
            loss += l * scale as f64;
            injected.extend(out.injected.iter().copied());
            model.backward(&tape, &dv, &mut grads);
        }
        if !loss.is_finite() {
            return Err(diverged(step + 1, loss));
        }
        optimizer_step(&mut model, &mut opt, &grads, cfg, step);
        log.losses.push(loss);
        if (step + 1) % 100 == 0 {
            log::info!("finetune step {}: loss {:.5}", step + 1, log.final_smoothed(100));
        }
    }
    Ok(Trained { model, log, injected })
}

/// Target for the backward model: the v target of the time-flipped clip
/// under the time-flipped noise.
pub fn backward_target(
    z: &Array4<f32>,
    eps: &Array4<f32>,
    t: usize,
    sched: &NoiseSchedule,
    mode: VTargetMode,
) -> Result<Array4<f32>> {
    v_target_with_mode(&flip_time(z, 0)?, &flip_time(eps, 0)?, t, sched, mode)
}
