use std::path::Path;

use switchtok::ExperimentConfig;

#[test]
fn shipped_desk_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}
