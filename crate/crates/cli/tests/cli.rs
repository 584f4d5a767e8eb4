use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use intermulti::data::{generate_synthetic, load_dataset, write_dataset, Label, Split, SyntheticSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_intermulti"))
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny/manifest.jsonl")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn masked_record(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("run.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["wall_clock_seconds"] = 0.into();
    v
}

#[test]
fn synth_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", s(dir.path()), "--n", "200", "--seed", "3"]);
    let manifest = dir.path().join("manifest.jsonl");
    let direct = generate_synthetic(&SyntheticSpec {
        n_samples: 200,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    for split in Split::ALL {
        assert_eq!(&load_dataset(&manifest, split).unwrap(), direct.split(split));
    }
}

#[test]
fn noiseless_shared_latent_is_linear_in_features() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "synth", "--out", s(dir.path()), "--n", "100", "--sigma", "0", "--alpha", "1", "--beta", "0", "0", "0", "--gamma", "0",
    ]);
    let train = load_dataset(&dir.path().join("manifest.jsonl"), Split::Train).unwrap();
    // Every text step is e0*z + e1*z_t, so two coordinates determine z.
    let rows: Vec<([f64; 2], f64)> = train
        .samples()
        .iter()
        .map(|smp| {
            let seq = &smp.sequences[0];
            for t in 1..seq.len() {
                assert_eq!(seq.step(t), seq.step(0));
            }
            let Label::Intensity(y) = smp.label else { panic!("regression label") };
            ([seq.step(0)[0], seq.step(0)[1]], 3.0 * (y / 3.0).atanh())
        })
        .collect();
    let (mut a, mut b) = ([[0.0; 2]; 2], [0.0; 2]);
    for (x, z) in &rows {
        for i in 0..2 {
            b[i] += x[i] * z;
            for j in 0..2 {
                a[i][j] += x[i] * x[j];
            }
        }
    }
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let w = [(b[0] * a[1][1] - b[1] * a[0][1]) / det, (a[0][0] * b[1] - a[1][0] * b[0]) / det];
    for (x, z) in &rows {
        let fit = w[0] * x[0] + w[1] * x[1];
        assert!((fit - z).abs() < 1e-6 * (1.0 + z.abs()), "{fit} vs {z}");
    }
}

#[test]
fn invalid_synth_spec_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", s(dir.path()), "--alpha", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_smoke_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&fixture()), "--out", s(&out), "--max-epochs", "2", "--quiet"]);
    for f in ["model.ckpt", "run.json", "epochs.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let rec = masked_record(&out);
    let epochs = rec["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 2);
    assert!(epochs.iter().all(|e| e["train_loss"].as_f64().unwrap().is_finite()));
    let csv = fs::read_to_string(out.join("epochs.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,val_loss,improved");
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(rec["metrics"].as_object().unwrap().len(), 3);

    let eval = ok(&["eval", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&fixture())]);
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["val"], rec["metrics"]["val"]);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str| {
        let out = dir.path().join(name);
        ok(&["train", "--data", s(&fixture()), "--out", s(&out), "--seed", "7", "--max-epochs", "3", "--quiet"]);
        out
    };
    let (a, b) = (go("a"), go("b"));
    assert_eq!(masked_record(&a), masked_record(&b));
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("epochs.csv")).unwrap(), fs::read(b.join("epochs.csv")).unwrap());

    let c = dir.path().join("c");
    ok(&["train", "--data", s(&fixture()), "--out", s(&c), "--seed", "8", "--max-epochs", "3", "--quiet"]);
    assert_ne!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(c.join("model.ckpt")).unwrap());
}

#[test]
fn depmetric_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&fixture()), "--out", s(&out), "--max-epochs", "1", "--quiet"]);
    let res = ok(&["depmetric", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&fixture()), "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["ia_S", "ia_it", "ia_iv", "it_S", "it_iv", "iv_S"]);
    assert!(out.join("depmetric_control.json").exists());
}

#[test]
fn ablate_grid_writes_table_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let res = ok(&[
        "ablate", "--data", s(&fixture()), "--out", s(&out), "--grid", "A0,A4,A5,A6", "--max-epochs", "1", "--parallel", "2", "--quiet",
    ]);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(String::from_utf8(res.stdout).unwrap(), table);
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "ablation");
    assert_eq!(&header[2], "val_loss");
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for (row, id) in rows.iter().zip(["A0", "A4", "A5", "A6"]) {
        assert_eq!(&row[0], id);
        assert!(row[2].parse::<f64>().unwrap().is_finite());
        assert!(row[3].parse::<f64>().is_ok(), "mae missing: {row:?}");
        assert!(out.join("runs").join(format!("{id}.json")).exists());
        assert!(out.join("runs").join(format!("{id}.ckpt")).exists());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());

    let grid = run(&["ablate", "--data", s(&fixture()), "--out", o, "--grid", "A0,A10"]);
    assert_eq!(grid.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&grid.stderr).contains("not implemented"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"lr\": 0.001,\n  \"batch\": 3\n}\n").unwrap();
    let bad = run(&["train", "--config", s(&cfg), "--data", s(&fixture()), "--out", o]);
    assert_eq!(bad.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("line 3") && msg.contains("batch"), "{msg}");

    let missing = run(&["train", "--data", s(&dir.path().join("nope.jsonl")), "--out", o]);
    assert_eq!(missing.status.code(), Some(3));

    let cfg = dir.path().join("diverge.json");
    fs::write(&cfg, r#"{"input_dims": [4, 3, 2], "lr": 1e300}"#).unwrap();
    let div = run(&["train", "--config", s(&cfg), "--data", s(&fixture()), "--out", o, "--quiet"]);
    assert_eq!(div.status.code(), Some(4), "{}", String::from_utf8_lossy(&div.stderr));
    assert!(String::from_utf8_lossy(&div.stderr).contains("first non-finite op"));
}

#[test]
fn incompatible_dims_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&fixture()), "--out", s(&out), "--max-epochs", "1", "--quiet"]);
    let other = generate_synthetic(&SyntheticSpec {
        n_samples: 20,
        ..Default::default()
    })
    .unwrap();
    let manifest = write_dataset(&dir.path().join("other"), &[&other.test]).unwrap();
    let res = run(&["depmetric", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&manifest)]);
    assert_eq!(res.status.code(), Some(3));
}
