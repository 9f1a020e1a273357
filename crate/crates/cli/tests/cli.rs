use std::path::Path;
use std::process::{Command, Output};

use frpt::backbone::{Backbone, BackboneArch};
use frpt::imageio;
use frpt::retrieval::{self, EmbeddingIndex};
use frpt::synthdata::{self, Dataset, Manifest, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn frpt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frpt")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o)
}

/// A small dataset in `data/` and a random desk backbone in `bb.frpt`.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_species: 4,
        n_subcats_per_species: 2,
        images_per_subcat: 5,
        species_train_per_class: 3,
        species_heldout_per_class: 1,
        ..SynthSpec::default()
    };
    synthdata::gen_synthetic(&spec, &dir.path().join("data")).unwrap();
    Backbone::<f32>::init(&BackboneArch::desk(), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .save(&dir.path().join("bb.frpt"))
        .unwrap();
    std::fs::write(dir.path().join("short.json"), r#"{"train": {"epochs": 2, "batch_size": 8}}"#).unwrap();
    dir
}

fn assert_usage_error(o: &Output) {
    assert_eq!(o.status.code(), Some(2), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: usage: "), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = fixture();
    let d = dir.path();
    assert_usage_error(&frpt(&["train", "--bogus"], d));
    assert_usage_error(&frpt(&["frobnicate"], d));
    assert_usage_error(&frpt(&["eval", "--checkpoint", "missing.frpt", "--backbone", "bb.frpt", "--data", "data"], d));
    std::fs::write(d.join("bad.json"), r#"{"train": {"lr": 0.1}}"#).unwrap();
    assert_usage_error(&frpt(&["train", "--config", "bad.json", "--backbone", "bb.frpt", "--data", "data", "--out", "r"], d));
    std::fs::write(d.join("neg.json"), r#"{"train": {"lr0": -1.0}}"#).unwrap();
    assert_usage_error(&frpt(&["train", "--config", "neg.json", "--backbone", "bb.frpt", "--data", "data", "--out", "r"], d));
    assert_usage_error(&frpt(&["gradcheck", "--scale", "paper"], d));
}

#[test]
fn corrupt_weights_are_a_runtime_failure() {
    let dir = fixture();
    let d = dir.path();
    let mut bytes = std::fs::read(d.join("bb.frpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(d.join("bad.frpt"), bytes).unwrap();
    let o = frpt(&["train", "--config", "short.json", "--backbone", "bad.frpt", "--data", "data", "--out", "r"], d);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: runtime: "));
}

#[test]
fn train_refuses_a_leaking_manifest() {
    let dir = fixture();
    let d = dir.path();
    let path = d.join("data").join(synthdata::MANIFEST);
    let mut m = Manifest::load(&path).unwrap();
    let row = m.entries.iter().position(|e| e.split == synthdata::TEST).unwrap();
    m.entries[row].split = synthdata::TRAIN.into();
    m.save(&path).unwrap();
    let o = frpt(&["train", "--config", "short.json", "--backbone", "bb.frpt", "--data", "data", "--out", "r"], d);
    assert_usage_error(&o);
    assert!(stderr(&o).contains("leak"));
    assert!(!d.join("r").exists());
}

#[test]
fn banner_counts_only_active_parts() {
    let dir = fixture();
    let d = dir.path();
    let base = ["train", "--config", "short.json", "--backbone", "bb.frpt", "--data", "data"];
    let pt = ok(frpt(&[&base[..], &["--out", "pt", "--no-dpp", "--no-cah"]].concat(), d));
    // 4 training subcategories, C_P = 64
    assert!(pt.contains("PT: learnable parameters: 260 [classifier 4·(64+1) = 260]"), "{pt}");
    let full = ok(frpt(&[&base[..], &["--out", "full"]].concat(), d));
    assert!(full.contains("learnable parameters: 2580 [dpp 9²·16 = 1296, cah 2·64²/8 = 1024, classifier 4·(64+1) = 260]"), "{full}");
    let metrics = std::fs::read_to_string(d.join("full/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,lr,loss,recall1\n"));
    assert_eq!(metrics.lines().count(), 3);
    let cfg = std::fs::read_to_string(d.join("pt/config.json")).unwrap();
    assert!(cfg.contains("\"use_dpp\": false") && cfg.contains("\"epochs\": 2"));
}

#[test]
fn shots_limit_the_training_set() {
    let dir = fixture();
    let d = dir.path();
    let out = ok(frpt(
        &["train", "--config", "short.json", "--backbone", "bb.frpt", "--data", "data", "--out", "r", "--shots", "2", "--finetune", "--no-dpp", "--no-cah"],
        d,
    ));
    assert!(out.contains("FT: learnable parameters: 260"), "{out}");
    assert!(out.contains("fine-tuned backbone parameters:"), "{out}");
    assert_usage_error(&frpt(
        &["train", "--config", "short.json", "--backbone", "bb.frpt", "--data", "data", "--out", "r0", "--shots", "0"],
        d,
    ));
}

#[test]
fn untrained_checkpoint_evaluates_to_the_pt_baseline() {
    let dir = fixture();
    let d = dir.path();
    ok(frpt(
        &["train", "--backbone", "bb.frpt", "--data", "data", "--out", "r", "--epochs", "0", "--no-dpp", "--no-cah"],
        d,
    ));
    let csv = ok(frpt(&["eval", "--checkpoint", "r/checkpoint.frpt", "--backbone", "bb.frpt", "--data", "data"], d));

    let backbone = Backbone::load(&d.join("bb.frpt")).unwrap();
    let test = Dataset::open(&d.join("data")).unwrap().subcat_samples(synthdata::TEST).unwrap();
    let embeddings = test
        .iter()
        .map(|s| {
            let m = backbone.full_forward(&s.image).unwrap();
            let plane = m.shape()[1] * m.shape()[2];
            m.data().chunks(plane).map(|c| c.iter().sum::<f32>() / plane as f32).collect()
        })
        .collect();
    let index = EmbeddingIndex::new(embeddings, test.iter().map(|s| s.label).collect(), test.iter().map(|s| s.id).collect())
        .unwrap();
    let mut want = String::from("k,recall\n");
    for r in retrieval::recall_at_ks(&index, &[1, 2, 4, 8]).unwrap() {
        want.push_str(&format!("{},{}\n", r.k, r.recall));
    }
    assert_eq!(csv, want);
    let again = ok(frpt(&["eval", "--checkpoint", "r/checkpoint.frpt", "--backbone", "bb.frpt", "--data", "data"], d));
    assert_eq!(csv, again);
}

#[test]
fn warp_writes_three_graymaps() {
    let dir = fixture();
    let d = dir.path();
    ok(frpt(&["train", "--config", "short.json", "--backbone", "bb.frpt", "--data", "data", "--out", "r"], d));
    let out = ok(frpt(
        &["warp", "--checkpoint", "r/checkpoint.frpt", "--backbone", "bb.frpt", "--image", "data/images/c000_000.ppm", "--out", "view"],
        d,
    ));
    assert!(out.contains("view"));
    for (suffix, side) in [("orig", 32), ("warped", 32), ("map", 16)] {
        let path = d.join(format!("view.{suffix}.pgm"));
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"), "{suffix}");
        assert_eq!(imageio::read_rgb(&path).unwrap().shape(), [3, side, side], "{suffix}");
    }
    ok(frpt(&["train", "--config", "short.json", "--backbone", "bb.frpt", "--data", "data", "--out", "nodpp", "--no-dpp"], d));
    let o = frpt(
        &["warp", "--checkpoint", "nodpp/checkpoint.frpt", "--backbone", "bb.frpt", "--image", "data/images/c000_000.ppm", "--out", "v2"],
        d,
    );
    assert_usage_error(&o);
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(frpt(&["gradcheck", "--scale", "desk", "--trials", "2"], dir.path()));
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert!(rows.len() >= 12, "{out}");
    assert!(rows.iter().all(|r| r.ends_with("ok")), "{out}");
    for op in ["conv2d", "softmax2d", "instance_norm", "compute_mapping", "warp", "cah_forward", "pipeline dpp/w_k"] {
        assert!(rows.iter().any(|r| r.starts_with(op)), "{op} missing:\n{out}");
    }
}

#[test]
fn config_prints_full_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(frpt(&["config"], dir.path()));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["train"]["lr0"], 1e-3);
    assert_eq!(v["train"]["batch_size"], 32);
    assert_eq!(v["ablation"]["use_in"], true);
}

#[test]
fn benchmark_config_file_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["train"]["gaussian_std"], 0.1);
    let cfg = frpt::training::benchmark_config(0);
    assert_eq!(v["train"]["lr0"], cfg.lr0);
    assert_eq!(v["train"]["epochs"], cfg.epochs as u64);
}
