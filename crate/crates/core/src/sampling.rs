//! Samplers: the deterministic v-space update, renoising for per-step
//! recurrence, single-direction sampling, dual-directional sampling with
//! fused predictions, and the baseline / ablation variants.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, Dimension, Array};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{decode, encode_frame, ClipMeta, VideoClip};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::temporal::{flip_time, rotate_set, AttentionMapSet, BlockKind, LayerId};
use crate::unet::{AttentionPlan, Conditioning, DenoiserModel, ForwardOutput};

/// Anything that predicts v for a noisy latent clip.
pub trait Denoiser {
    fn predict(
        &self,
        z_t: &Array4<f32>,
        t: usize,
        cond: &Conditioning<f32>,
        plan: &AttentionPlan<f32>,
    ) -> Result<ForwardOutput<f32>>;

    /// Identifies the architecture, for compatibility checks between the two
    /// directions. `None` opts out of the check.
    fn architecture(&self) -> Option<String> {
        None
    }
}

impl Denoiser for DenoiserModel {
    fn predict(
        &self,
        z_t: &Array4<f32>,
        t: usize,
        cond: &Conditioning<f32>,
        plan: &AttentionPlan<f32>,
    ) -> Result<ForwardOutput<f32>> {
        self.forward(z_t, t, cond, plan)
    }

    fn architecture(&self) -> Option<String> {
        Some(self.architecture_hash())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    /// Forward model only, conditioned on the first keyframe.
    ForwardOnly,
    /// Forward model plus fine-tuned backward model with rotated-map injection.
    Dual,
    /// Both directions with the forward model and no injection.
    TrfBaseline,
    /// Backward branch is the untuned forward model, injection in up blocks only.
    WoFt,
    /// Backward branch is a model fine-tuned without injection; run without it.
    WoRa,
    /// Backward branch only. The result is in the backward model's own time
    /// order, i.e. it starts near the last keyframe.
    BackwardOnly,
}

impl SampleMode {
    pub const ALL: [SampleMode; 6] = [
        SampleMode::ForwardOnly,
        SampleMode::Dual,
        SampleMode::TrfBaseline,
        SampleMode::WoFt,
        SampleMode::WoRa,
        SampleMode::BackwardOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SampleMode::ForwardOnly => "forward",
            SampleMode::Dual => "dual",
            SampleMode::TrfBaseline => "trf",
            SampleMode::WoFt => "wo_ft",
            SampleMode::WoRa => "wo_ra",
            SampleMode::BackwardOnly => "backward",
        }
    }

    /// Whether the mode needs a separately trained backward model.
    pub fn needs_backward_model(self) -> bool {
        matches!(self, SampleMode::Dual | SampleMode::WoRa | SampleMode::BackwardOnly)
    }
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        let alias = match norm.as_str() {
            "forward_only" => "forward",
            "trf_baseline" => "trf",
            "backward_only" => "backward",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown sampling mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionRule {
    Mean,
}

impl FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionRule::Mean),
            _ => Err(Error::Config(format!("unknown fusion rule '{s}'"))),
        }
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("mean")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of denoising steps.
    pub steps: usize,
    /// Denoising repeats per step, with renoising in between.
    pub recurrence: usize,
    pub fusion: FusionRule,
    pub seed: u64,
    pub mode: SampleMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            recurrence: 5,
            fusion: FusionRule::Mean,
            seed: 0,
            mode: SampleMode::Dual,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if self.steps > sched.steps() {
            return Err(Error::Config(format!(
                "{} sampling steps exceed the schedule's {}",
                self.steps,
                sched.steps()
            )));
        }
        if self.recurrence < 1 {
            return Err(Error::Config("recurrence must be >= 1".into()));
        }
        Ok(())
    }
}

/// Descending timesteps `T = t_0 > t_1 > ... > t_K = 0` for `steps` updates.
pub fn timesteps(steps: usize, sched: &NoiseSchedule) -> Vec<usize> {
    let total = sched.steps();
    let mut ts: Vec<usize> = (0..=steps)
        .rev()
        .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Moves `z_t` to level `s < t` along the predicted `(ẑ_0, ε̂)`.
pub fn update_to<D: Dimension>(
    z_t: &Array<f32, D>,
    v_hat: &Array<f32, D>,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    if t == 0 || s >= t {
        return Err(Error::Argument(format!("cannot update from t={t} to {s}")));
    }
    if z_t.shape() != v_hat.shape() {
        return Err(Error::shape(z_t.shape(), v_hat.shape()));
    }
    sched.check_step(t)?;
    // α_s ẑ_0 + σ_s ε̂ with ẑ_0 = α_t z − σ_t v and ε̂ = σ_t z + α_t v, in one pass
    let (at, st) = (sched.alpha(t), sched.sigma(t));
    let (a, sg) = (sched.alpha(s), sched.sigma(s));
    let (cz, cv) = (a * at + sg * st, sg * at - a * st);
    Ok(ndarray::Zip::from(z_t)
        .and(v_hat)
        .map_collect(|&z, &v| (cz * z as f64 + cv * v as f64) as f32))
}

/// `z_{t-1} = α_{t-1} ẑ_0 + σ_{t-1} ε̂`
pub fn update<D: Dimension>(
    z_t: &Array<f32, D>,
    v_hat: &Array<f32, D>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    if t == 0 {
        return Err(Error::Argument("update needs t >= 1".into()));
    }
    update_to(z_t, v_hat, t, t - 1, sched)
}

/// Brings a latent at level `s` back to level `t > s`:
/// `z_t = (α_t/α_s) z_s + sqrt(σ_t² − (α_t/α_s)² σ_s²) ε`.
pub fn renoise_from<D: Dimension, R: Rng>(
    z_s: &Array<f32, D>,
    s: usize,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array<f32, D>> {
    sched.check_step(t)?;
    if s >= t {
        return Err(Error::Argument(format!("cannot renoise from {s} to {t}")));
    }
    let ratio = sched.alpha(t) / sched.alpha(s);
    let var = sched.sigma(t).powi(2) - ratio * ratio * sched.sigma(s).powi(2);
    if var < -1e-12 {
        return Err(Error::Schedule(format!(
            "negative bridge variance {var} between levels {s} and {t}"
        )));
    }
    let std = var.max(0.0).sqrt();
    Ok(z_s.mapv(|z| {
        let e: f64 = rng.sample(StandardNormal);
        (ratio * z as f64 + std * e) as f32
    }))
}

/// Renoises `z_{t-1}` back to level `t`.
pub fn renoise<D: Dimension, R: Rng>(
    z_prev: &Array<f32, D>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array<f32, D>> {
    if t == 0 {
        return Err(Error::Argument("renoise needs t >= 1".into()));
    }
    renoise_from(z_prev, t - 1, t, sched, rng)
}

pub fn fuse<D: Dimension>(v_fwd: &Array<f32, D>, v_bwd_flipped: &Array<f32, D>, rule: FusionRule) -> Result<Array<f32, D>> {
    if v_fwd.shape() != v_bwd_flipped.shape() {
        return Err(Error::shape(v_fwd.shape(), v_bwd_flipped.shape()));
    }
    match rule {
        FusionRule::Mean => Ok(ndarray::Zip::from(v_fwd)
            .and(v_bwd_flipped)
            .map_collect(|&a, &b| (a + b) * 0.5)),
    }
}

/// Models taking part in one sampling run.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub forward: &'a dyn Denoiser,
    /// Fine-tuned backward model (full or w/o-RA variant, matching the mode).
    pub backward: Option<&'a dyn Denoiser>,
}

/// Record of one sampling run: which layers received injected maps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionAudit {
    pub layers: std::collections::BTreeSet<LayerId>,
}

impl InjectionAudit {
    pub fn only_blocks(&self, blocks: &[BlockKind]) -> bool {
        self.layers.iter().all(|l| blocks.contains(&l.block))
    }
}

pub struct Sampler<'a> {
    models: Models<'a>,
    cfg: SamplerConfig,
    sched: &'a NoiseSchedule,
    rng: ChaCha8Rng,
    audit: InjectionAudit,
}

fn with_step(e: Error, t: usize) -> Error {
    match e {
        Error::Numeric { location } => Error::Numeric {
            location: format!("sampling step t={t}: {location}"),
        },
        other => other,
    }
}

impl<'a> Sampler<'a> {
    pub fn new(models: Models<'a>, cfg: SamplerConfig, sched: &'a NoiseSchedule) -> Result<Self> {
        cfg.validate(sched)?;
        if cfg.mode.needs_backward_model() && models.backward.is_none() {
            return Err(Error::Config(format!("mode '{}' needs a backward model", cfg.mode)));
        }
        if let (Some(b), Some(fa)) = (models.backward, models.forward.architecture()) {
            if let Some(ba) = b.architecture() {
                if ba != fa {
                    return Err(Error::Config(
                        "forward and backward models have different architectures".into(),
                    ));
                }
            }
        }
        Ok(Self {
            models,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            sched,
            audit: InjectionAudit::default(),
        })
    }

    pub fn audit(&self) -> &InjectionAudit {
        &self.audit
    }

    fn extract(&mut self, z_t: &Array4<f32>, t: usize, c0: &Conditioning<f32>) -> Result<(Array4<f32>, AttentionMapSet<f32>)> {
        let out = self.models.forward.predict(z_t, t, c0, &AttentionPlan::extract())?;
        Ok((out.v, out.maps.unwrap_or_default()))
    }

    fn backward_branch(&mut self, model: &dyn Denoiser, z_t: &Array4<f32>, t: usize, cn: &Conditioning<f32>, plan: &AttentionPlan<f32>) -> Result<Array4<f32>> {
        let out = model.predict(&flip_time(z_t, 0)?, t, cn, plan)?;
        self.audit.layers.extend(out.injected.iter().copied());
        flip_time(&out.v, 0)
    }

    /// Fused velocity for `z_t`, in forward time order.
    fn velocity(&mut self, z_t: &Array4<f32>, t: usize, c0: &Conditioning<f32>, cn: &Conditioning<f32>) -> Result<Array4<f32>> {
        let fwd = self.models.forward;
        let mode = self.cfg.mode;
        match mode {
            SampleMode::ForwardOnly => Ok(fwd.predict(z_t, t, c0, &AttentionPlan::compute())?.v),
            SampleMode::TrfBaseline => {
                let v0 = fwd.predict(z_t, t, c0, &AttentionPlan::compute())?.v;
                let v1 = self.backward_branch(fwd, z_t, t, cn, &AttentionPlan::compute())?;
                fuse(&v0, &v1, self.cfg.fusion)
            }
            SampleMode::WoRa => {
                let bwd = self.models.backward.expect("checked in new");
                let v0 = fwd.predict(z_t, t, c0, &AttentionPlan::compute())?.v;
                let v1 = self.backward_branch(bwd, z_t, t, cn, &AttentionPlan::compute())?;
                fuse(&v0, &v1, self.cfg.fusion)
            }
            SampleMode::WoFt => {
                let (v0, maps) = self.extract(z_t, t, c0)?;
                let plan = AttentionPlan::inject_only(rotate_set(&maps), &[BlockKind::Up]);
                let v1 = self.backward_branch(fwd, z_t, t, cn, &plan)?;
                fuse(&v0, &v1, self.cfg.fusion)
            }
            SampleMode::Dual | SampleMode::BackwardOnly => {
                let bwd = self.models.backward.expect("checked in new");
                let (v0, maps) = self.extract(z_t, t, c0)?;
                let plan = AttentionPlan::inject(rotate_set(&maps));
                let v1 = self.backward_branch(bwd, z_t, t, cn, &plan)?;
                if mode == SampleMode::BackwardOnly {
                    Ok(v1)
                } else {
                    fuse(&v0, &v1, self.cfg.fusion)
                }
            }
        }
    }

    /// Runs the sampler from pure noise. Keyframes are `[C, H, W]` pixel
    /// frames; the result has `frames` frames.
    pub fn run(&mut self, first: &Array3<f32>, last: &Array3<f32>, frames: usize) -> Result<VideoClip> {
        if first.dim() != last.dim() {
            return Err(Error::shape(first.shape(), last.shape()));
        }
        if frames < 2 {
            return Err(Error::Argument("need at least 2 frames".into()));
        }
        let (c, h, w) = first.dim();
        let c0 = Conditioning::new(encode_frame(first));
        let cn = Conditioning::new(encode_frame(last));
        let rng = &mut self.rng;
        let mut z: Array4<f32> = Array4::from_shape_simple_fn((frames, c, h, w), || rng.sample(StandardNormal));
        let ts = timesteps(self.cfg.steps, self.sched);
        for pair in ts.windows(2) {
            let (t, s) = (pair[0], pair[1]);
            let repeats = if s == 0 { 1 } else { self.cfg.recurrence };
            let mut z_t = z;
            let mut z_s = None;
            for r in 0..repeats {
                let v = self.velocity(&z_t, t, &c0, &cn).map_err(|e| with_step(e, t))?;
                let next = update_to(&z_t, &v, t, s, self.sched)?;
                if !next.iter().all(|x| x.is_finite()) {
                    return Err(Error::Numeric {
                        location: format!("sampling step t={t}"),
                    });
                }
                if r + 1 < repeats {
                    z_t = renoise_from(&next, s, t, self.sched, &mut self.rng)?;
                } else {
                    z_s = Some(next);
                }
            }
            z = z_s.expect("at least one repeat");
        }
        if self.cfg.mode == SampleMode::BackwardOnly {
            z = flip_time(&z, 0)?;
        }
        let mut meta = ClipMeta::new(format!("sample:{}", self.cfg.mode), self.cfg.seed);
        meta.params.insert("steps".into(), self.cfg.steps as f64);
        meta.params.insert("recurrence".into(), self.cfg.recurrence as f64);
        VideoClip::new(decode(&z), meta)
    }
}

/// One-shot convenience wrapper around [`Sampler`].
pub fn sample(
    models: Models<'_>,
    first: &Array3<f32>,
    last: &Array3<f32>,
    frames: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<VideoClip> {
    Sampler::new(models, cfg.clone(), sched)?.run(first, last, frames)
}

pub fn sample_dual(
    first: &Array3<f32>,
    last: &Array3<f32>,
    fwd: &DenoiserModel,
    bwd: &DenoiserModel,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<VideoClip> {
    let cfg = SamplerConfig { mode: SampleMode::Dual, ..cfg.clone() };
    sample(Models { forward: fwd, backward: Some(bwd) }, first, last, fwd.config().frames, &cfg, sched)
}

pub fn sample_trf_baseline(
    first: &Array3<f32>,
    last: &Array3<f32>,
    fwd: &DenoiserModel,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<VideoClip> {
    let cfg = SamplerConfig { mode: SampleMode::TrfBaseline, ..cfg.clone() };
    sample(Models { forward: fwd, backward: None }, first, last, fwd.config().frames, &cfg, sched)
}

pub fn sample_wo_ft(
    first: &Array3<f32>,
    last: &Array3<f32>,
    fwd: &DenoiserModel,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<VideoClip> {
    let cfg = SamplerConfig { mode: SampleMode::WoFt, ..cfg.clone() };
    sample(Models { forward: fwd, backward: None }, first, last, fwd.config().frames, &cfg, sched)
}
