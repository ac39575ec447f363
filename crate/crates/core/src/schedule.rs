//! Variance-preserving noise schedule, forward corruption, the v-prediction
//! target and its inversion.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest allowed signal coefficient at the terminal step.
pub const MIN_TERMINAL_ALPHA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleFamily {
    Cosine,
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cosine")
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule family '{other}'"))),
        }
    }
}

/// Whether the v target is built from the clean latent (`α ε − σ z`) or, as
/// in the literal training-loop text, from the noisy latent (`α ε − σ z_t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VTargetMode {
    #[default]
    Clean,
    Literal,
}

impl fmt::Display for VTargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VTargetMode::Clean => "clean",
            VTargetMode::Literal => "literal",
        })
    }
}

impl FromStr for VTargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown v_target_mode '{other}'"))),
        }
    }
}

/// Discrete table `t -> (α_t, σ_t)` for `t = 0..=T` with `α² + σ² = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, family: ScheduleFamily) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Argument("schedule needs at least one step".into()));
        }
        let (alphas, sigmas) = match family {
            ScheduleFamily::Cosine => (0..=steps)
                .map(|t| {
                    let theta = 0.5 * std::f64::consts::PI * t as f64 / steps as f64;
                    let alpha = theta.cos().max(MIN_TERMINAL_ALPHA);
                    (alpha, (1.0 - alpha * alpha).sqrt())
                })
                .unzip(),
        };
        Ok(Self {
            family,
            alphas,
            sigmas,
        })
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// `T`, the index of the noisiest level.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::Argument(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }
}

fn same_shape<D: Dimension>(a: &Array<f32, D>, b: &Array<f32, D>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(a.shape(), b.shape()))
    }
}

/// `z_t = α_t z + σ_t ε`
pub fn corrupt<D: Dimension>(
    z: &Array<f32, D>,
    t: usize,
    eps: &Array<f32, D>,
    sched: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    same_shape(z, eps)?;
    sched.check_step(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let mut out = z.clone();
    ndarray::Zip::from(&mut out)
        .and(eps)
        .for_each(|o, &e| *o = (a * *o as f64 + s * e as f64) as f32);
    Ok(out)
}

/// `v = α_t ε − σ_t z` (clean form).
pub fn v_target<D: Dimension>(
    z: &Array<f32, D>,
    eps: &Array<f32, D>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    v_target_with_mode(z, eps, t, sched, VTargetMode::Clean)
}

/// v target under either convention. In literal mode the subtracted term is
/// the noisy latent `z_t = α_t z + σ_t ε` instead of `z`.
pub fn v_target_with_mode<D: Dimension>(
    z: &Array<f32, D>,
    eps: &Array<f32, D>,
    t: usize,
    sched: &NoiseSchedule,
    mode: VTargetMode,
) -> Result<Array<f32, D>> {
    same_shape(z, eps)?;
    sched.check_step(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let mut out = z.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
        let (zv, ev) = (*o as f64, e as f64);
        let data = match mode {
            VTargetMode::Clean => zv,
            VTargetMode::Literal => a * zv + s * ev,
        };
        *o = (a * ev - s * data) as f32;
    });
    Ok(out)
}

/// Recovers `(ẑ_0, ε̂)` from a noisy latent and a velocity:
/// `ẑ_0 = α z_t − σ v`, `ε̂ = σ z_t + α v`.
pub fn invert_v<D: Dimension>(
    z_t: &Array<f32, D>,
    v: &Array<f32, D>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Array<f32, D>, Array<f32, D>)> {
    same_shape(z_t, v)?;
    sched.check_step(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let mut z0 = z_t.clone();
    let mut eps = z_t.clone();
    ndarray::Zip::from(&mut z0)
        .and(&mut eps)
        .and(v)
        .for_each(|z0, e, &vv| {
            let (zt, vv) = (*z0 as f64, vv as f64);
            *z0 = (a * zt - s * vv) as f32;
            *e = (s * zt + a * vv) as f32;
        });
    Ok((z0, eps))
}
