use std::path::Path;

use tcc_lab::cache::CacheKind;
use tcc_lab::config::RunConfig;

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn shipped_default_matches_builtin_default() {
    let cfg = RunConfig::parse(&fixture("default.cfg")).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.fingerprint(), RunConfig::default().fingerprint());
}

#[test]
fn shipped_variants_parse() {
    let d = RunConfig::parse(&fixture("distortion.cfg")).unwrap();
    assert_eq!(d.cache.kind, CacheKind::Distortion);
    assert_eq!(d.cache.distortion, RunConfig::default().cache.distortion);
    let t = RunConfig::parse(&fixture("token-level.cfg")).unwrap();
    assert_eq!(t.cache.kind, CacheKind::TokenLevel);
    assert_ne!(d.fingerprint(), t.fingerprint());
}

#[test]
fn calibration_keys_do_not_change_the_fingerprint() {
    let base = RunConfig::default();
    let other = RunConfig::parse("calibration.alpha = 0.5\ncalibration.window = 19..16\nrun.seed = 4").unwrap();
    assert_eq!(base.fingerprint(), other.fingerprint());
    let moved = RunConfig::parse("cache.interval_n = 3").unwrap();
    assert_ne!(base.fingerprint(), moved.fingerprint());
}
