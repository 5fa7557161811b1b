use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use strokeseg_cli::pipeline::{FuseIndex, FusedCase, PredictIndex, PredictedCase, ViewFiles};
use strokeseg_cli::{run, Outcome, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use strokeseg_core::fusion::FusionParams;
use strokeseg_core::phantom::DatasetManifest;
use strokeseg_core::volume::{write_smsk, write_svol, VolumeGrid, VolumeKind};
use tempfile::TempDir;

fn strokeseg(dir: &Path, args: &[&str]) -> Outcome {
    let mut full = vec!["strokeseg".to_string()];
    full.extend(args.iter().map(|a| {
        // Path-like arguments are taken relative to the scratch directory.
        match a.strip_prefix('@') {
            Some(rel) => dir.join(rel).to_string_lossy().into_owned(),
            None => a.to_string(),
        }
    }));
    run(full)
}

fn schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../docs/schemas/{name}.schema.json"));
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_schema(name: &str, out: &Outcome) {
    assert_eq!(out.code, EXIT_OK, "{name}: {}", out.stderr);
    let doc = out.json.as_ref().expect("a JSON document");
    let validator = jsonschema::validator_for(&schema(name)).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
    // the JSON document is the last line of stdout
    let last = out.stdout.lines().last().unwrap();
    assert_eq!(&serde_json::from_str::<Value>(last).unwrap(), doc);
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let cfg = json!({
        "phantom": {"dims": [32, 32, 32]},
        "predict_batch": 8,
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn defaults_match_their_schema_and_reload() {
    let tmp = TempDir::new().unwrap();
    let out = strokeseg(tmp.path(), &["defaults"]);
    assert_schema("defaults", &out);
    let path = tmp.path().join("defaults.json");
    fs::write(&path, out.json.unwrap().to_string()).unwrap();
    let again = strokeseg(tmp.path(), &["--config", "@defaults.json", "defaults"]);
    assert_eq!(again.code, EXIT_OK);
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn config_with_unknown_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"train": {"setps": 10}}"#).unwrap();
    let out = strokeseg(tmp.path(), &["--config", "@bad.json", "defaults"]);
    assert_eq!(out.code, EXIT_USAGE);
    assert!(out.stderr.contains("strokeseg defaults:") && out.stderr.contains("setps"), "{}", out.stderr);
}

#[test]
fn missing_config_file_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let out = strokeseg(tmp.path(), &["--config", "@nope.json", "defaults"]);
    assert_eq!(out.code, EXIT_IO);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"seed": 5, "phantom": {"count": 4, "dims": [32, 32, 32]}}"#).unwrap();
    let out = strokeseg(tmp.path(), &["--config", "@c.json", "phantom", "--count", "3", "--out", "@d"]);
    assert_schema("phantom", &out);
    let doc = out.json.unwrap();
    assert_eq!(doc["count"], 3);
    assert_eq!(doc["seed"], 5);
}

#[test]
fn parse_errors_exit_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(strokeseg(tmp.path(), &["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(strokeseg(tmp.path(), &["stats", "--a", "3"]).code, EXIT_USAGE);
    assert_eq!(strokeseg(tmp.path(), &["train", "--projection", "oblique"]).code, EXIT_USAGE);
    let help = strokeseg(tmp.path(), &["--help"]);
    assert_eq!(help.code, EXIT_OK);
    for cmd in ["defaults", "phantom", "train", "predict", "fuse", "classify", "evaluate", "stats", "gradcheck"] {
        assert!(help.stdout.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn phantom_writes_count_entries() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = strokeseg(tmp.path(), &["--config", cfg.to_str().unwrap(), "phantom", "--count", "5", "--out", "@data"]);
    assert_schema("phantom", &out);
    let manifest = DatasetManifest::load(&tmp.path().join("data")).unwrap();
    assert_eq!(manifest.cases.len(), 5);
    assert!(out.stdout.contains("case_004"));
}

#[test]
fn phantom_mix_must_sum_to_one() {
    let tmp = TempDir::new().unwrap();
    let out = strokeseg(tmp.path(), &["phantom", "--mix", "0.5,0.5,0.5", "--out", "@data"]);
    assert_eq!(out.code, EXIT_USAGE);
    assert!(out.stderr.contains("sum to 1"), "{}", out.stderr);
    assert!(!tmp.path().join("data").exists());
    let out = strokeseg(tmp.path(), &["phantom", "--mix", "0.5,0.5", "--out", "@data"]);
    assert_eq!(out.code, EXIT_USAGE);
}

#[test]
fn phantom_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    for d in ["@a", "@b"] {
        assert_eq!(strokeseg(tmp.path(), &["--config", cfg, "phantom", "--count", "4", "--seed", "11", "--out", d]).code, 0);
    }
    let (a, b) = (tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")));
    assert_eq!(a.len(), 9);
    assert!(a == b, "same seed must give byte-identical datasets");
}

#[test]
fn stats_matches_reference_p_values() {
    let tmp = TempDir::new().unwrap();
    let out = strokeseg(tmp.path(), &["stats", "--a", "19", "--b", "7", "--n", "180"]);
    assert_schema("stats", &out);
    let p = out.json.unwrap()["p_value"].as_f64().unwrap();
    assert!((p - 0.024).abs() <= 0.005, "{p}");
    let out = strokeseg(tmp.path(), &["stats", "--a", "5", "--b", "5", "--n", "10"]);
    assert_eq!(out.json.unwrap()["p_value"].as_f64().unwrap(), 1.0);
}

#[test]
fn stats_rejects_counts_above_n() {
    let tmp = TempDir::new().unwrap();
    let out = strokeseg(tmp.path(), &["stats", "--a", "11", "--b", "5", "--n", "10"]);
    assert_eq!(out.code, EXIT_USAGE);
    assert!(out.stderr.starts_with("strokeseg stats:"));
}

#[test]
fn evaluate_class_lists() {
    let tmp = TempDir::new().unwrap();
    let truth: Vec<&str> = (0..180).map(|i| ["healthy", "ischemic", "hemorrhagic"][i % 3]).collect();
    let mut pred = truth.clone();
    for p in pred.iter_mut().take(7) {
        *p = if *p == "healthy" { "ischemic" } else { "healthy" };
    }
    fs::write(tmp.path().join("t.json"), serde_json::to_string(&truth).unwrap()).unwrap();
    fs::write(tmp.path().join("p.json"), serde_json::to_string(&pred).unwrap()).unwrap();
    let out = strokeseg(tmp.path(), &["evaluate", "--truth", "@t.json", "--predicted", "@p.json"]);
    assert_schema("evaluate-classes", &out);
    let doc = out.json.unwrap();
    assert_eq!(doc["errors"], 7);
    assert!((doc["accuracy"].as_f64().unwrap() - 0.9611).abs() <= 1e-4);
}

fn prob(dims: [usize; 3], v: f32) -> VolumeGrid {
    VolumeGrid::filled(dims, [1.0; 3], v, VolumeKind::Probability).unwrap()
}

/// Writes a prediction directory with one case whose sagittal maps have
/// `sagittal_dims`.
fn fake_predictions(dir: &Path, dims: [usize; 3], sagittal_dims: [usize; 3]) {
    fs::create_dir_all(dir.join("c0")).unwrap();
    let maps = ViewFiles {
        axial: ["c0/a0.svol".into(), "c0/a1.svol".into()],
        coronal: ["c0/c0.svol".into(), "c0/c1.svol".into()],
        sagittal: ["c0/s0.svol".into(), "c0/s1.svol".into()],
    };
    for p in maps.axial.iter().chain(&maps.coronal) {
        write_svol(&dir.join(p), &prob(dims, 0.2), 1.0, 0.0).unwrap();
    }
    for p in &maps.sagittal {
        write_svol(&dir.join(p), &prob(sagittal_dims, 0.2), 1.0, 0.0).unwrap();
    }
    let index = PredictIndex {
        models: [1, 2, 2],
        cases: vec![PredictedCase {
            case_id: "c0".into(),
            dims,
            maps,
        }],
    };
    fs::write(dir.join("index.json"), serde_json::to_string(&index).unwrap()).unwrap();
}

#[test]
fn fuse_with_mismatched_dims_names_them() {
    let tmp = TempDir::new().unwrap();
    fake_predictions(&tmp.path().join("pred"), [4, 5, 6], [4, 5, 7]);
    let out = strokeseg(tmp.path(), &["fuse", "--pred", "@pred", "--out", "@fused"]);
    assert_eq!(out.code, EXIT_USAGE, "{}", out.stderr);
    assert!(out.stderr.contains("[4, 5, 6]") && out.stderr.contains("[4, 5, 7]"), "{}", out.stderr);
}

#[test]
fn fuse_and_classify_constant_maps() {
    let tmp = TempDir::new().unwrap();
    fake_predictions(&tmp.path().join("pred"), [4, 5, 6], [4, 5, 6]);
    let out = strokeseg(tmp.path(), &["fuse", "--pred", "@pred", "--out", "@fused", "--k-axial", "0.1"]);
    assert_schema("fuse", &out);
    let index: FuseIndex = serde_json::from_value(out.json.unwrap()).unwrap();
    assert_eq!(index.params.k_axial, 0.1);
    // 0.2 > 0.1 on the axial view, so both channels are fully on
    assert_eq!(index.cases[0].voxels, [120, 120]);
    let out = strokeseg(tmp.path(), &["classify", "--fused", "@fused"]);
    assert_schema("classify", &out);
    assert!(tmp.path().join("fused/classes.json").exists());
}

#[test]
fn missing_inputs_are_io_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(strokeseg(tmp.path(), &["fuse", "--pred", "@nothing"]).code, EXIT_IO);
    assert_eq!(strokeseg(tmp.path(), &["classify", "--fused", "@nothing"]).code, EXIT_IO);
    assert_eq!(strokeseg(tmp.path(), &["train", "--data", "@nothing"]).code, EXIT_IO);
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = strokeseg(tmp.path(), &["--config", cfg, "phantom", "--count", "6", "--out", "@data"]);
    assert_eq!(out.code, 0);
    let data = tmp.path().join("data");
    let manifest = DatasetManifest::load(&data).unwrap();
    let fused = tmp.path().join("fused");
    let mut cases = Vec::new();
    for c in &manifest.cases {
        fs::create_dir_all(fused.join(&c.id)).unwrap();
        let gt = strokeseg_core::volume::read_smsk(&data.join(&c.mask)).unwrap();
        let labels = Path::new(&c.id).join("labels.smsk");
        write_smsk(&fused.join(&labels), &gt).unwrap();
        cases.push(FusedCase {
            case_id: c.id.clone(),
            labels,
            vpred: ["unused".into(), "unused".into()],
            voxels: [0, 0],
        });
    }
    let index = FuseIndex {
        params: FusionParams::default(),
        cases,
    };
    fs::write(fused.join("index.json"), serde_json::to_string(&index).unwrap()).unwrap();
    let out = strokeseg(tmp.path(), &["evaluate", "--data", "@data", "--fused", "@fused", "--out", "@m.json"]);
    assert_schema("evaluate", &out);
    let doc = out.json.unwrap();
    assert_eq!(doc["columns"]["ih_is"]["dsc_mean"], 1.0);
    assert!(doc["cases"].as_array().unwrap().iter().all(|c| c["dsc"] == 1.0));
    let written: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(written, doc);
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("c.json"),
        r#"{"phantom": {"dims": [32, 32, 32]}, "train": {"lr0": 1e30, "lr_decay": 1.0, "steps": 30, "eval_every": 10}}"#,
    )
    .unwrap();
    assert_eq!(strokeseg(tmp.path(), &["--config", "@c.json", "phantom", "--count", "4", "--out", "@data"]).code, 0);
    let out = strokeseg(
        tmp.path(),
        &["--config", "@c.json", "train", "--data", "@data", "--out", "@runs", "--projection", "axial", "--seeds", "1"],
    );
    assert_eq!(out.code, EXIT_NUMERIC, "{}", out.stderr);
    assert!(out.stderr.contains("strokeseg train:") && out.stderr.contains("non-finite loss"));
}

#[test]
fn gradcheck_passes_on_a_fresh_checkout() {
    let tmp = TempDir::new().unwrap();
    let out = strokeseg(tmp.path(), &["gradcheck"]);
    assert_schema("gradcheck", &out);
    let doc = out.json.unwrap();
    assert_eq!(doc["passed"], true);
    let names: Vec<&str> = doc["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for want in ["conv2d_3x3", "dpn_block/train", "se_block", "decoder_stage/eval", "tiny_model/train"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
}

#[test]
fn end_to_end_on_ten_phantoms() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let steps = ["--steps", "20", "--eval-every", "10", "--seeds", "2", "--keep", "2"];

    let out = strokeseg(tmp.path(), &["--config", cfg, "phantom", "--count", "10", "--seed", "2", "--out", "@data"]);
    assert_schema("phantom", &out);
    let mut args = vec!["--config", cfg, "train", "--data", "@data", "--out", "@runs"];
    args.extend(steps);
    let out = strokeseg(tmp.path(), &args);
    assert_schema("train", &out);
    assert_eq!(out.json.as_ref().unwrap()["views"].as_array().unwrap().len(), 3);
    for view in ["axial", "coronal", "sagittal"] {
        for seed in ["seed_000", "seed_001"] {
            let run = tmp.path().join("runs").join(view).join(seed);
            assert!(run.join("step_000010").is_dir() && run.join("step_000020").is_dir());
            assert!(run.join("best/model.json").is_file() && run.join("train_log.json").is_file());
        }
    }

    let chain = |suffix: &str| {
        let pred = format!("@pred{suffix}");
        let fused = format!("@fused{suffix}");
        let metrics = format!("@metrics{suffix}.json");
        let out = strokeseg(tmp.path(), &["--config", cfg, "predict", "--data", "@data", "--runs", "@runs", "--out", &pred]);
        assert_schema("predict", &out);
        let out = strokeseg(tmp.path(), &["--config", cfg, "fuse", "--pred", &pred, "--out", &fused]);
        assert_schema("fuse", &out);
        let out = strokeseg(tmp.path(), &["--config", cfg, "classify", "--fused", &fused]);
        assert_schema("classify", &out);
        let out = strokeseg(tmp.path(), &["--config", cfg, "evaluate", "--data", "@data", "--fused", &fused, "--out", &metrics]);
        assert_schema("evaluate", &out);
        let report = out.json.unwrap();
        assert!(report["classification"]["n"].as_u64().unwrap() >= 1);
        report
    };
    let first = chain("");
    let second = chain("2");
    assert_eq!(first, second);
    let p = |name: &str| tmp.path().join(name);
    assert!(tree_bytes(&p("pred")) == tree_bytes(&p("pred2")), "predict is not idempotent");
    assert!(tree_bytes(&p("fused")) == tree_bytes(&p("fused2")), "fuse is not idempotent");
    assert_eq!(fs::read(p("metrics.json")).unwrap(), fs::read(p("metrics2.json")).unwrap());
}
