//! Attention-map extraction and injection through the full denoiser, and the
//! per-mode injection audit of the sampler.

use bidiff::nn::ParamId;
use bidiff::sampling::{Models, SampleMode, Sampler, SamplerConfig};
use bidiff::schedule::{NoiseSchedule, ScheduleFamily};
use bidiff::temporal::{BlockKind, LayerId};
use bidiff::unet::{AttentionPlan, Conditioning, DenoiserModel, UnetConfig};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Default architecture with every parameter pushed off its initialization,
/// so that zero-initialized output layers do not hide anything.
fn model(seed: u64) -> DenoiserModel {
    let mut m = DenoiserModel::new(UnetConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let ids: Vec<ParamId> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        m.params.get_mut(id).mapv_inplace(|v| v + 0.05 * rng.sample::<f32, _>(StandardNormal));
    }
    m
}

fn inputs(seed: u64, frames: usize, size: usize) -> (Array4<f32>, Conditioning<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array4::from_shape_simple_fn((frames, 3, size, size), || rng.sample(StandardNormal));
    let c = Array3::from_shape_simple_fn((3, size, size), || rng.random_range(-1.0..1.0));
    (z, Conditioning::new(c))
}

fn max_abs(a: &Array4<f32>, b: &Array4<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn injecting_own_maps_reproduces_the_plain_forward() {
    let m = model(3);
    let registry = m.registry();
    assert_eq!(registry.len(), 5);
    let mut worst = 0.0f32;
    for i in 0..10 {
        let (z, c) = inputs(i, 16, 16);
        let t = 1 + (i as usize * 7) % 50;
        let plain = m.forward(&z, t, &c, &AttentionPlan::compute()).unwrap();
        assert_eq!(plain.v.dim(), z.dim());
        assert!(plain.maps.is_none());
        let extracted = m.forward(&z, t, &c, &AttentionPlan::extract()).unwrap();
        assert_eq!(extracted.v, plain.v);
        let maps = extracted.maps.unwrap();
        assert_eq!(maps.layers().copied().collect::<Vec<_>>(), registry);
        for (_, map) in maps.iter() {
            assert_eq!((map.dim().1, map.dim().2), (16, 16));
        }
        for layer in &registry {
            let single = maps.filtered(|l| l == layer);
            let out = m.forward(&z, t, &c, &AttentionPlan::inject(single)).unwrap();
            assert_eq!(out.injected, vec![*layer]);
            worst = worst.max(max_abs(&out.v, &plain.v));
        }
        let joint = m.forward(&z, t, &c, &AttentionPlan::inject(maps)).unwrap();
        assert_eq!(joint.injected, registry);
        worst = worst.max(max_abs(&joint.v, &plain.v));
    }
    assert!(worst < 1e-5, "max-abs deviation {worst}");
}

#[test]
fn injected_maps_change_the_output() {
    let m = model(4);
    let (z, c) = inputs(1, 8, 16);
    let (z2, _) = inputs(2, 8, 16);
    let plain = m.forward(&z, 20, &c, &AttentionPlan::compute()).unwrap();
    let foreign = m.forward(&z2, 20, &c, &AttentionPlan::extract()).unwrap().maps.unwrap();
    let out = m.forward(&z, 20, &c, &AttentionPlan::inject(foreign)).unwrap();
    assert!(max_abs(&out.v, &plain.v) > 1e-3);
}

#[test]
fn up_only_plan_leaves_down_and_mid_computed() {
    let m = model(5);
    let (z, c) = inputs(3, 4, 8);
    let maps = m.forward(&z, 10, &c, &AttentionPlan::extract()).unwrap().maps.unwrap();
    let out = m.forward(&z, 10, &c, &AttentionPlan::inject_only(maps, &[BlockKind::Up])).unwrap();
    assert_eq!(out.injected, vec![LayerId::new(BlockKind::Up, 0), LayerId::new(BlockKind::Up, 1)]);
}

#[test]
fn conditioning_frame_affects_prediction() {
    let m = model(6);
    let (z, c1) = inputs(4, 4, 8);
    let (_, c2) = inputs(5, 4, 8);
    let a = m.forward(&z, 25, &c1, &AttentionPlan::compute()).unwrap().v;
    let b = m.forward(&z, 25, &c2, &AttentionPlan::compute()).unwrap().v;
    assert!(max_abs(&a, &b) > 0.0);
}

#[test]
fn shape_errors_are_reported() {
    let m = model(7);
    let (z, c) = inputs(0, 17, 8);
    assert!(m.forward(&z, 1, &c, &AttentionPlan::compute()).is_err());
    let (z, _) = inputs(0, 4, 8);
    let (_, c16) = inputs(0, 4, 16);
    assert!(m.forward(&z, 1, &c16, &AttentionPlan::compute()).is_err());
    let (z, c) = inputs(0, 4, 6);
    assert!(m.forward(&z, 1, &c, &AttentionPlan::compute()).is_err());
}

#[test]
fn sampler_audit_matches_each_mode() {
    let fwd = model(8);
    let bwd = model(9);
    let sched = NoiseSchedule::new(50, ScheduleFamily::Cosine).unwrap();
    let (first, last) = (Array3::from_elem((3, 8, 8), 0.2f32), Array3::from_elem((3, 8, 8), 0.7f32));
    let audit = |mode: SampleMode| {
        let cfg = SamplerConfig { steps: 2, recurrence: 2, mode, ..SamplerConfig::default() };
        let models = Models { forward: &fwd, backward: mode.needs_backward_model().then_some(&bwd as _) };
        let mut s = Sampler::new(models, cfg, &sched).unwrap();
        s.run(&first, &last, 4).unwrap();
        s.audit().layers.iter().copied().collect::<Vec<_>>()
    };
    assert_eq!(audit(SampleMode::Dual), fwd.registry());
    assert_eq!(audit(SampleMode::BackwardOnly), fwd.registry());
    assert_eq!(audit(SampleMode::WoFt), vec![LayerId::new(BlockKind::Up, 0), LayerId::new(BlockKind::Up, 1)]);
    assert!(audit(SampleMode::WoRa).is_empty());
    assert!(audit(SampleMode::TrfBaseline).is_empty());
    assert!(audit(SampleMode::ForwardOnly).is_empty());
}
