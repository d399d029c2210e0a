use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use madenc::config::PipelineConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_madenc")
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/example.json")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn config_hash() -> String {
    PipelineConfig::load(&example_config(), &[]).unwrap().hash()
}

#[test]
fn synth_mads_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let data = dir.path().join("data");
    let mads = dir.path().join("mads");
    let out = dir.path().join("eval");
    for args in [
        vec!["synth", "--config", p(&cfg), "--out", p(&data)],
        vec!["mads", "--config", p(&cfg), "--data", p(&data), "--out", p(&mads)],
        vec!["evaluate", "--config", p(&cfg), "--mads", p(&mads), "--out", p(&out)],
    ] {
        let o = run(&args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cv_report.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"]["config_hash"], config_hash());
    assert_eq!(report["fold_accuracy"].as_array().unwrap().len(), 4);
    let folds = std::fs::read_to_string(out.join("cv_folds.csv")).unwrap();
    assert!(folds.starts_with("# {"));
    assert!(folds.contains(&config_hash()));
    assert!(!out.join("INCOMPLETE").exists());
}

#[test]
fn encode_then_evaluate_matches_in_process_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let enc = dir.path().join("enc");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["encode", "--config", p(&cfg), "--out", p(&enc)]).status.success());
    assert!(run(&["evaluate", "--config", p(&cfg), "--encoded", p(&enc), "--out", p(&a)]).status.success());
    assert!(run(&["evaluate", "--config", p(&cfg), "--out", p(&b)]).status.success());
    let ra = std::fs::read(a.join("cv_report.json")).unwrap();
    let rb = std::fs::read(b.join("cv_report.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn missing_dictionary_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let enc = dir.path().join("enc");
    let out = dir.path().join("out");
    assert!(run(&["encode", "--config", p(&cfg), "--out", p(&enc)]).status.success());
    let victim = enc.join("fold_01/dictionary.json");
    std::fs::remove_file(&victim).unwrap();
    std::fs::create_dir_all(&out).unwrap();
    let o = run(&["evaluate", "--config", p(&cfg), "--encoded", p(&enc), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("fold_01/dictionary.json"), "{err}");
    assert!(out.join("INCOMPLETE").exists());
    assert!(!out.join("cv_report.json").exists());
}

#[test]
fn grid_writes_cells_and_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["grid", "--config", p(&example_config()), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let cells = csv.lines().filter(|l| l.starts_with("cell,")).count();
    let best = csv.lines().filter(|l| l.starts_with("best,")).count();
    assert_eq!(cells, 8);
    assert_eq!(best, 2);
}

#[test]
fn energy_and_ablation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["energy", "--config", p(&example_config()), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("energy.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "gaussian_index,energy,rank");
    assert_eq!(csv.lines().count(), 2 + 4);
    let abl: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(abl["spec"]["m"], 1);

    let o = run(&[
        "energy", "--config", p(&example_config()), "--out", p(dir.path()), "--mode", "select", "--which", "gle",
        "--m", "5",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn export_codewords_with_atlas() {
    let dir = tempfile::tempdir().unwrap();
    let atlas = dir.path().join("atlas.csv");
    let mut text = String::from("region_name,x,y,z\n");
    for i in 1..=10 {
        text.push_str(&format!("R{i:02},{i},{},{}\n", -i, 2 * i));
    }
    std::fs::write(&atlas, text).unwrap();
    let out = dir.path().join("cw");
    let o = run(&["export-codewords", "--config", p(&example_config()), "--out", p(&out), "--atlas", p(&atlas)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for rank in 1..=4 {
        let csv = std::fs::read_to_string(out.join(format!("codeword_{rank:03}.csv"))).unwrap();
        assert_eq!(csv.lines().filter(|l| l.starts_with('R')).count(), 10);
        let node = std::fs::read_to_string(out.join(format!("codeword_{rank:03}.node"))).unwrap();
        assert_eq!(node.lines().count(), 10);
        assert_eq!(node.lines().next().unwrap().split_whitespace().count(), 6);
    }
    assert!(!out.join("codeword_005.csv").exists());
}

#[test]
fn export_without_atlas_writes_csv_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["export-codewords", "--config", p(&example_config()), "--out", p(dir.path())]);
    assert!(o.status.success());
    assert!(dir.path().join("codeword_001.csv").exists());
    assert!(!dir.path().join("codeword_001.node").exists());
}

#[test]
fn baseline_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["baseline", "--config", p(&example_config()), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("baseline.csv")).unwrap();
    let methods: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, vec!["fv", "pearson", "bold"]);
    assert!(dir.path().join("baseline_bold_report.json").exists());
}

#[test]
fn overrides_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let o = run(&["evaluate", "--config", p(&cfg), "--out", p(dir.path()), "--set", "svm_c=-1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["evaluate", "--config", p(&cfg), "--out", p(dir.path()), "--set", "folds=40"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["evaluate", "--config", p(&dir.path().join("nope.json")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"p": 3}"#).unwrap();
    let o = run(&["evaluate", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // Two identical driver templates make neighbours collinear; without a
    // ridge penalty the Gram matrix is singular.
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
            "synth": {"R": 3, "C": 2, "subjects": 2, "T_per_class": [20], "noise_sigma": 0.0, "seed": 1,
                      "templates": [[[0,0,0],[1,0,0],[2,0,0]], [[0,0,0],[-1,0,0],[3,0,0]]]},
            "p": 2, "ridge_lambda": 0.0, "pca_dim": "none", "k": 2, "folds": 2, "seed": 1
        }"#,
    )
    .unwrap();
    let o = run(&["mads", "--config", p(&cfg), "--out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ridge_lambda"));
}
