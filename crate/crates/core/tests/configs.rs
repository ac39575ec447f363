//! The configuration files shipped in `configs/`.

use std::path::Path;

use bidiff::config::RunConfig;

fn shipped(name: &str) -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn default_config_file_matches_built_in_defaults() {
    assert_eq!(shipped("default.cfg").to_text(), RunConfig::default().to_text());
}

#[test]
fn smoke_config_is_valid() {
    let cfg = shipped("smoke.cfg");
    cfg.validate().unwrap();
    assert!(cfg.pretrain.iterations < 100);
}
