//! Analytic gradients of the denoiser against central finite differences,
//! on a tiny double-precision model.

mod common;

use bidiff::temporal::{rotate_set, BlockKind};
use bidiff::unet::{AttentionPlan, TrainablePolicy};
use common::{case, fd_check};

#[test]
fn all_parameters_match_finite_differences() {
    let c = case(1);
    let r = fd_check(&c, &AttentionPlan::compute(), 1e-3);
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
    assert_eq!(r.checked, c.model.params.len());
    println!("worst relative error {:e}", r.worst);
}

#[test]
fn value_output_gradients_match_under_injection() {
    let mut c = case(2);
    c.model.set_trainable(TrainablePolicy::TemporalVoOnly);
    let donor = case(3);
    let maps = donor
        .model
        .forward(&donor.z, donor.t, &donor.cond, &AttentionPlan::extract())
        .unwrap()
        .maps
        .unwrap();
    for plan in [AttentionPlan::inject(rotate_set(&maps)), AttentionPlan::inject_only(maps, &[BlockKind::Up])] {
        let r = fd_check(&c, &plan, 1e-3);
        assert!(r.failures.is_empty(), "{:#?}", r.failures);
        assert_eq!(r.checked, 10);
    }
}

#[test]
fn vo_gradients_match_without_injection() {
    let mut c = case(4);
    c.model.set_trainable(TrainablePolicy::TemporalQkvoOnly);
    let r = fd_check(&c, &AttentionPlan::compute(), 1e-3);
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
    assert_eq!(r.checked, 20);
}
