use std::fs::File;
use std::path::{Path, PathBuf};

use intermulti::data::{generate_synthetic, load_dataset, read_manifest, read_samples, Split, SyntheticSpec, Task};
use intermulti::model::{InterMulti, ModelConfig};

fn dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

#[test]
fn tiny_fixture_has_known_shape() {
    let manifest = dir().join("manifest.jsonl");
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 3);
    let sizes: Vec<usize> = Split::ALL
        .iter()
        .map(|&s| load_dataset(&manifest, s).unwrap().len())
        .collect();
    assert_eq!(sizes, [7, 1, 2]);
    let train = load_dataset(&manifest, Split::Train).unwrap();
    assert_eq!(train.dims(), [4, 3, 2]);
    assert_eq!(train.task(), Task::Regression);
    for s in train.samples() {
        let lens = s.sequences.each_ref().map(|q| q.len());
        assert!((2..=4).contains(&lens[0]) && (2..=3).contains(&lens[1]) && (2..=3).contains(&lens[2]));
    }
}

#[test]
fn tiny_fixture_matches_its_generator_spec() {
    let spec: SyntheticSpec = serde_json::from_reader(File::open(dir().join("spec.json")).unwrap()).unwrap();
    let fresh = generate_synthetic(&spec).unwrap();
    let on_disk = read_samples(File::open(dir().join("train.imft")).unwrap()).unwrap();
    assert_eq!(on_disk.as_slice(), fresh.train.samples());
}

#[test]
fn model_runs_on_fixture() {
    let manifest = dir().join("manifest.jsonl");
    let test = load_dataset(&manifest, Split::Test).unwrap();
    let model = InterMulti::new(ModelConfig {
        input_dims: test.dims(),
        ..ModelConfig::default()
    })
    .unwrap();
    let (preds, reps) = model.infer(test.samples()).unwrap();
    assert_eq!(preds.len(), 2);
    assert_eq!(reps[0].fused.len(), 96);
    assert!(preds.iter().all(|p| p.len() == 1 && p[0].is_finite()));
}
