use std::path::{Path, PathBuf};

use handmesh::config::RunConfig;
use handmesh::model::ModelConfig;

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn default_file_matches_built_in_defaults() {
    let c = RunConfig::load(&shipped("default.conf")).unwrap();
    c.validate().unwrap();
    assert_eq!(c, RunConfig::default());
}

#[test]
fn desk_file_matches_desk_preset() {
    assert_eq!(RunConfig::load(&shipped("desk.conf")).unwrap(), RunConfig::desk());
}

#[test]
fn miniature_file_matches_miniature_model() {
    let c = RunConfig::load(&shipped("miniature.conf")).unwrap();
    c.validate().unwrap();
    assert_eq!(c.model, ModelConfig::miniature());
}

#[test]
fn full_file_uses_batch_32_and_data_paths() {
    let c = RunConfig::load(&shipped("full.conf")).unwrap();
    c.validate().unwrap();
    assert_eq!(c.train.batch_size, 32);
    assert_eq!((c.train.epochs, c.train.lr_boundary), (200, 100));
    assert!(c.train_manifest.unwrap().ends_with("freihand/train/manifest.txt"));
}
