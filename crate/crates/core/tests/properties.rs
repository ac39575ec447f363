//! Randomized invariants of the time-reversal primitives, the noise schedule,
//! the data generators and the trajectory metrics.

use bidiff::dataset::{generate_clip, load_dataset, save_dataset, MotionLaw};
use bidiff::evaluation::{track_centroids, DEFAULT_BACKGROUND_LEVEL};
use bidiff::sampling::{fuse, FusionRule};
use bidiff::schedule::{corrupt, invert_v, v_target, NoiseSchedule, ScheduleFamily};
use bidiff::temporal::{flip_time, rotate_map_180};
use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss3(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn gauss4(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn softmax_rows(a: &Array3<f64>) -> Array3<f64> {
    let mut out = a.clone();
    for mut site in out.axis_iter_mut(Axis(0)) {
        for mut row in site.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
    }
    out
}

fn max_abs<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn flip_and_rotate_are_involutions(seed in any::<u64>(), s in 1usize..5, n in 1usize..9, c in 1usize..4) {
        let a = gauss3(seed, (s, n, n));
        prop_assert_eq!(rotate_map_180(&rotate_map_180(&a).unwrap()).unwrap(), a.clone());
        let x = gauss4(seed, (n, c, 2, 3));
        prop_assert_eq!(flip_time(&flip_time(&x, 0).unwrap(), 0).unwrap(), x);
    }

    #[test]
    fn rotated_logits_equal_logits_of_flipped_features(seed in any::<u64>(), n in 2usize..10, d in 1usize..9) {
        let q = gauss3(seed, (1, n, d)).index_axis_move(Axis(0), 0);
        let k = gauss3(seed ^ 0x5eed, (1, n, d)).index_axis_move(Axis(0), 0);
        let logits = |q: &Array2<f64>, k: &Array2<f64>| q.dot(&k.t()).insert_axis(Axis(0));
        let rotated = rotate_map_180(&logits(&q, &k)).unwrap();
        let flipped = logits(&flip_time(&q, 0).unwrap(), &flip_time(&k, 0).unwrap());
        prop_assert!(max_abs(&rotated, &flipped) < 1e-6);
    }

    #[test]
    fn softmax_commutes_with_rotation(seed in any::<u64>(), s in 1usize..4, n in 2usize..10) {
        let a = gauss3(seed, (s, n, n)).mapv(|v| 3.0 * v);
        let lhs = softmax_rows(&rotate_map_180(&a).unwrap());
        let rhs = rotate_map_180(&softmax_rows(&a)).unwrap();
        prop_assert!(max_abs(&lhs, &rhs) < 1e-7);
    }

    #[test]
    fn corrupt_and_v_target_invert(seed in any::<u64>(), t in 0usize..=50) {
        let sched = NoiseSchedule::new(50, ScheduleFamily::Cosine).unwrap();
        let z = gauss4(seed, (3, 2, 4, 4));
        let eps = gauss4(seed.wrapping_add(1), (3, 2, 4, 4));
        let z_t = corrupt(&z, t, &eps, &sched).unwrap();
        let v = v_target(&z, &eps, t, &sched).unwrap();
        let (z0, e0) = invert_v(&z_t, &v, t, &sched).unwrap();
        let err = |a: &Array4<f32>, b: &Array4<f32>| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(err(&z0, &z) < 1e-5, "z error {}", err(&z0, &z));
        prop_assert!(err(&e0, &eps) < 1e-5, "eps error {}", err(&e0, &eps));
    }

    #[test]
    fn fusing_identical_predictions_is_identity(seed in any::<u64>()) {
        let v = gauss4(seed, (4, 3, 2, 2));
        prop_assert_eq!(fuse(&v, &v, FusionRule::Mean).unwrap(), v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generators_are_pure_and_time_asymmetric(seed in 0u64..10_000, law in prop::sample::select(MotionLaw::ALL.to_vec())) {
        let a = generate_clip(law, seed, 16, 32, 32).unwrap();
        let b = generate_clip(law, seed, 16, 32, 32).unwrap();
        prop_assert_eq!(a.frames(), b.frames());
        let d = track_centroids(&a, DEFAULT_BACKGROUND_LEVEL).unwrap().displacements;
        let m = d.len();
        let asym = (0..m).map(|i| (d[i].abs() - d[m - 1 - i].abs()).abs()).sum::<f64>() / m as f64;
        prop_assert!(asym > 0.0);
    }

    #[test]
    fn tracker_is_flip_equivariant(seed in 0u64..10_000, law in prop::sample::select(MotionLaw::ALL.to_vec())) {
        let clip = generate_clip(law, seed, 16, 32, 32).unwrap();
        let fwd = track_centroids(&clip, DEFAULT_BACKGROUND_LEVEL).unwrap();
        let rev = track_centroids(&clip.reversed(), DEFAULT_BACKGROUND_LEVEL).unwrap();
        let expected: Vec<f64> = fwd.displacements.iter().rev().map(|d| -d).collect();
        prop_assert_eq!(rev.displacements, expected);
        prop_assert_eq!(rev.reversal_count, fwd.reversal_count);
    }

    #[test]
    fn dataset_round_trips_bit_exactly(seed in 0u64..10_000, frames in 2usize..6) {
        let clips: Vec<_> = MotionLaw::ALL.iter().map(|&l| generate_clip(l, seed, frames, 16, 16).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&clips, &path).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), clips);
    }
}

#[test]
fn schedule_is_monotone_and_variance_preserving() {
    let sched = NoiseSchedule::new(50, ScheduleFamily::Cosine).unwrap();
    assert_eq!((sched.alpha(0), sched.sigma(0)), (1.0, 0.0));
    for t in 1..=50 {
        assert!(sched.alpha(t) < sched.alpha(t - 1));
        assert!(sched.sigma(t) > sched.sigma(t - 1));
        assert!((sched.alpha(t).powi(2) + sched.sigma(t).powi(2) - 1.0).abs() < 1e-12);
    }
    let n = 4000;
    let z = gauss4(1, (n, 1, 1, 1));
    let eps = gauss4(2, (n, 1, 1, 1));
    for t in [0, 10, 25, 40, 50] {
        let zt = corrupt(&z, t, &eps, &sched).unwrap();
        let var = zt.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
        let zvar = z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
        let evar = eps.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
        let expected = sched.alpha(t).powi(2) * zvar + sched.sigma(t).powi(2) * evar;
        assert!((var / expected - 1.0).abs() < 0.05, "t={t}: {var} vs {expected}");
    }
}
