#![allow(dead_code)]

use std::path::PathBuf;

use xexplain::{load_model, read_dataset_manifest, ModelBundle, RecordMeta};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn desk() -> ModelBundle {
    let d = fixtures().join("desk");
    load_model(d.join("model.onnx"), d.join("manifest.json")).expect("desk model loads")
}

pub fn toy() -> ModelBundle {
    let d = fixtures().join("toy");
    load_model(d.join("linear.onnx"), d.join("manifest.json")).expect("toy model loads")
}

pub fn train() -> Vec<RecordMeta> {
    read_dataset_manifest(fixtures().join("desk/train.json")).unwrap()
}

pub fn test_split() -> Vec<RecordMeta> {
    read_dataset_manifest(fixtures().join("desk/test.json")).unwrap()
}
