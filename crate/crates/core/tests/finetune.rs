//! Parameter-level contracts of backward fine-tuning: which weights move, which
//! stay bit-identical, and that the forward model is never touched.

use std::collections::BTreeSet;

use bidiff::dataset::{generate_dataset, MotionLaw, VideoClip};
use bidiff::training::{finetune_backward, pretrain_forward, FinetuneMode, TrainConfig};
use bidiff::unet::{DenoiserModel, TrainablePolicy, UnetConfig};
use bidiff::Error;
use ndarray::ArrayD;

fn setup() -> (DenoiserModel, Vec<VideoClip>) {
    let cfg = UnetConfig { frames: 4, channels: vec![8, 16], head_dim: 8, groups: 4, time_dim: 16, timesteps: 20, ..UnetConfig::default() };
    let data = generate_dataset(MotionLaw::AccelBall, 4, 0, 4, 8, 8).unwrap();
    let init = DenoiserModel::new(cfg, 1).unwrap();
    // a few pretraining steps so that no layer sits at its zero initialization
    let pre = TrainConfig { iterations: 5, batch_size: 2, ..TrainConfig::pretrain() };
    (pretrain_forward(init, &data, &pre).unwrap().model, data)
}

fn projection_set(m: &DenoiserModel, which: &[usize]) -> BTreeSet<String> {
    m.registry()
        .into_iter()
        .flat_map(|l| {
            let names = m.projection_names(l).unwrap();
            which.iter().map(move |&i| names[i].clone()).collect::<Vec<_>>()
        })
        .collect()
}

fn norm(a: &ArrayD<f32>) -> f64 {
    a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

/// Names of parameters whose values differ, and the size of each change.
fn diff(a: &DenoiserModel, b: &DenoiserModel) -> Vec<(String, f64)> {
    a.params
        .iter()
        .zip(b.params.iter())
        .filter(|((_, x), (_, y))| x.value != y.value)
        .map(|((_, x), (_, y))| (x.name.clone(), norm(&(&y.value - &x.value))))
        .collect()
}

fn ft_config(policy: TrainablePolicy) -> TrainConfig {
    TrainConfig { iterations: 10, batch_size: 2, policy, ..TrainConfig::finetune() }
}

#[test]
fn full_finetuning_moves_only_value_and_output_projections() {
    let (forward, data) = setup();
    let hash = forward.params.content_hash();
    let out = finetune_backward(&forward, &data, FinetuneMode::Full, &ft_config(TrainablePolicy::TemporalVoOnly)).unwrap();
    assert_eq!(forward.params.content_hash(), hash);
    assert_eq!(out.log.losses.len(), 10);

    let expected = projection_set(&forward, &[2, 3]);
    assert_eq!(expected.len(), 10);
    let changed = diff(&forward, &out.model);
    let names: BTreeSet<String> = changed.iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, expected);
    assert!(changed.iter().all(|(_, d)| *d > 0.0));
    assert_eq!(out.model.trainable_policy(), Some(TrainablePolicy::TemporalVoOnly));
    assert_eq!(out.model.architecture_hash(), forward.architecture_hash());
}

#[test]
fn without_rotation_all_four_projections_move() {
    let (forward, data) = setup();
    let hash = forward.params.content_hash();
    let out = finetune_backward(&forward, &data, FinetuneMode::WoRa, &ft_config(TrainablePolicy::TemporalQkvoOnly)).unwrap();
    assert_eq!(forward.params.content_hash(), hash);
    let expected = projection_set(&forward, &[0, 1, 2, 3]);
    assert_eq!(expected.len(), 20);
    let changed: BTreeSet<String> = diff(&forward, &out.model).into_iter().map(|(n, _)| n).collect();
    assert_eq!(changed, expected);
}

#[test]
fn finetuning_is_reproducible() {
    let (forward, data) = setup();
    let cfg = ft_config(TrainablePolicy::TemporalVoOnly);
    let a = finetune_backward(&forward, &data, FinetuneMode::Full, &cfg).unwrap();
    let b = finetune_backward(&forward, &data, FinetuneMode::Full, &cfg).unwrap();
    assert_eq!(a.model.params.content_hash(), b.model.params.content_hash());
    assert_eq!(a.log.losses, b.log.losses);
    let c = finetune_backward(&forward, &data, FinetuneMode::Full, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.model.params.content_hash(), c.model.params.content_hash());
}

#[test]
fn mismatched_mode_and_policy_are_rejected() {
    let (forward, data) = setup();
    for (mode, policy) in [
        (FinetuneMode::Full, TrainablePolicy::TemporalQkvoOnly),
        (FinetuneMode::Full, TrainablePolicy::All),
        (FinetuneMode::WoRa, TrainablePolicy::TemporalVoOnly),
    ] {
        let r = finetune_backward(&forward, &data, mode, &ft_config(policy));
        assert!(matches!(r, Err(Error::Config(_))), "{mode} {policy}");
    }
}

#[test]
fn training_records_which_layers_ran_on_injected_maps() {
    let (forward, data) = setup();
    let full = finetune_backward(&forward, &data, FinetuneMode::Full, &ft_config(TrainablePolicy::TemporalVoOnly)).unwrap();
    assert_eq!(full.injected.iter().copied().collect::<Vec<_>>(), forward.registry());
    let wo_ra = finetune_backward(&forward, &data, FinetuneMode::WoRa, &ft_config(TrainablePolicy::TemporalQkvoOnly)).unwrap();
    assert!(wo_ra.injected.is_empty());
}
