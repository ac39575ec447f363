//! Helpers shared by several integration-test targets.
#![allow(dead_code)]

use bidiff::nn::{Grads, ParamId};
use bidiff::schedule::NoiseSchedule;
use bidiff::unet::{AttentionPlan, Conditioning, ForwardOutput, Unet, UnetConfig};
use bidiff::sampling::Denoiser;
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Returns the exact velocity that points every noisy latent at one fixed
/// clean latent: `v = (α_t z_t − x) / σ_t`.
pub struct Oracle {
    pub target: Array4<f32>,
    pub sched: NoiseSchedule,
}

impl Denoiser for Oracle {
    fn predict(&self, z_t: &Array4<f32>, t: usize, _: &Conditioning<f32>, _: &AttentionPlan<f32>) -> bidiff::Result<ForwardOutput<f32>> {
        let (a, s) = (self.sched.alpha(t), self.sched.sigma(t));
        let v = ndarray::Zip::from(z_t)
            .and(&self.target)
            .map_collect(|&z, &x| ((a * z as f64 - x as f64) / s) as f32);
        Ok(ForwardOutput { v, maps: None, injected: Vec::new() })
    }
}

/// Two-frame, 4x4 double-precision denoiser.
pub fn micro() -> UnetConfig {
    UnetConfig {
        latent_channels: 2,
        frames: 3,
        channels: vec![4, 8],
        head_dim: 4,
        groups: 2,
        time_dim: 8,
        timesteps: 10,
    }
}

pub struct Case {
    pub model: Unet<f64>,
    pub z: Array4<f64>,
    pub cond: Conditioning<f64>,
    pub probe: Array4<f64>,
    pub t: usize,
}

pub fn case(seed: u64) -> Case {
    let mut model = Unet::<f64>::new(micro(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // move every parameter away from its (often zero/one) initialization
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        model
            .params
            .get_mut(id)
            .mapv_inplace(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let mut gauss = |shape: (usize, usize, usize, usize)| Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
    let z = gauss((2, 2, 4, 4));
    let probe = gauss((2, 2, 4, 4));
    let cond = Conditioning::new(Array3::from_shape_fn((2, 4, 4), |(c, y, x)| ((c * 16 + y * 4 + x) as f64 * 0.7).sin()));
    Case { model, z, cond, probe, t: 6 }
}

fn loss(c: &Case, model: &Unet<f64>, plan: &AttentionPlan<f64>) -> f64 {
    let out = model.forward(&c.z, c.t, &c.cond, plan).unwrap();
    (&out.v * &c.probe).sum()
}

pub struct FdReport {
    /// Worst relative error between analytic and central-difference entries.
    pub worst: f64,
    /// Parameters that received a gradient.
    pub checked: usize,
    /// Entries over the tolerance, described.
    pub failures: Vec<String>,
}

/// Compares analytic gradients of `<v, probe>` with central differences on a
/// sample of entries of every parameter that receives a gradient.
pub fn fd_check(c: &Case, plan: &AttentionPlan<f64>, tol: f64) -> FdReport {
    let (_, tape) = c.model.forward_with_tape(&c.z, c.t, &c.cond, plan).unwrap();
    let mut grads = Grads::for_store(&c.model.params);
    c.model.backward(&tape, &c.probe, &mut grads);
    let h = 1e-5;
    let mut report = FdReport { worst: 0.0, checked: 0, failures: Vec::new() };
    for (id, g) in grads.iter() {
        let n = g.len();
        let picks: Vec<usize> = if n <= 4 { (0..n).collect() } else { vec![0, n / 3, 2 * n / 3, n - 1] };
        for i in picks {
            let mut plus = c.model.clone();
            plus.params.get_mut(id).as_slice_mut().unwrap()[i] += h;
            let mut minus = c.model.clone();
            minus.params.get_mut(id).as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(c, &plus, plan) - loss(c, &minus, plan)) / (2.0 * h);
            let an = g.as_slice().unwrap()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel >= tol {
                report.failures.push(format!(
                    "{} [{i}]: analytic {an:e}, finite difference {fd:e}",
                    c.model.params.param(id).name
                ));
            }
            report.worst = report.worst.max(rel);
        }
        report.checked += 1;
    }
    report
}
