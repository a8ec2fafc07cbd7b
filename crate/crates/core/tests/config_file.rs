use std::path::Path;

use rlfb_core::RunConfig;

#[test]
fn shipped_default_config_matches_builtins() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = RunConfig::load(&path, &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
