use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecoprod"))
}

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/config.json")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn ecoprod")
}

fn check(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth", "--provinces", "12", "--complaints", "60", "--clusters", "3", "--dim", "4"];
    for name in ["a", "b"] {
        check(&run(bin().args(args).arg("--out").arg(dir.path().join(name))));
    }
    for f in ["provinces.csv", "complaints.jsonl", "ground_truth.json"] {
        assert_eq!(read(&dir.path().join("a").join(f)), read(&dir.path().join("b").join(f)), "{f}");
    }
    let bad = run(bin().args(["synth", "--clusters", "0", "--out"]).arg(dir.path().join("c")));
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("c").exists());
}

#[test]
fn missing_input_is_a_config_error_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"provinces": "nowhere.csv", "complaints": "nowhere.jsonl", "output_dir": "out"}"#).unwrap();
    let out = run(bin().arg("pipeline").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
    assert!(!dir.path().join("out").exists());

    let absent = dir.path().join("absent.json");
    let out = run(bin().arg("pipeline").arg("--config").arg(&absent));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn invalid_overrides_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for set in ["cluster.k=0", "causal.bootstrap=10", "clutser.k=3", "train"] {
        let out = run(bin()
            .arg("pipeline")
            .arg("--config")
            .arg(fixture_config())
            .args(["--set", set, "--out"])
            .arg(dir.path().join("out")));
        assert_eq!(out.status.code(), Some(2), "--set {set}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn failing_stage_leaves_marker_and_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(bin()
        .arg("pipeline")
        .arg("--config")
        .arg(fixture_config())
        .args(["--set", "causal.covariates=[\"no_such_column\"]", "--set", "cluster.k=8", "--set", "cluster.permutations=0"])
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("[causal]") && stderr.contains("no_such_column"), "{stderr}");
    let marker = std::fs::read_to_string(out_dir.join("FAILED")).unwrap();
    assert!(marker.starts_with("stage: causal"));
    for f in ["dea_scores.csv", "clusters.csv", "model.json", "shap.csv"] {
        assert!(out_dir.join(f).is_file(), "{f} retained");
    }
    assert!(!out_dir.join("summary.json").exists());
    assert!(!out_dir.join("ate_report.json").exists());
}

fn stage_seed(summary: &serde_json::Value, stage: &str) -> String {
    summary["stage_seeds"][stage].as_u64().expect("stage seed").to_string()
}

#[test]
fn pipeline_matches_standalone_stages() {
    let dir = tempfile::tempdir().unwrap();
    let piped = dir.path().join("pipeline");
    check(&run(bin().arg("pipeline").arg("--config").arg(fixture_config()).arg("--out").arg(&piped)));
    let summary: serde_json::Value = serde_json::from_slice(&read(&piped.join("summary.json"))).unwrap();
    for files in summary["artifacts"].as_object().unwrap().values() {
        for f in files.as_array().unwrap() {
            assert!(piped.join(f.as_str().unwrap()).is_file(), "{f}");
        }
    }

    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let provinces = fx.join("provinces.csv");
    let complaints = fx.join("complaints.jsonl");
    let manual = dir.path().join("manual");
    check(&run(bin().arg("dea").arg("--provinces").arg(&provinces).args(["--rts", "vrs", "--out"]).arg(&manual)));
    check(&run(bin()
        .arg("cluster")
        .arg("--complaints")
        .arg(&complaints)
        .arg("--dea-scores")
        .arg(manual.join("dea_scores.csv"))
        .args(["--kmax", "12", "--permutations", "19", "--seed", &stage_seed(&summary, "cluster"), "--out"])
        .arg(&manual)));
    check(&run(bin()
        .arg("train")
        .arg("--provinces")
        .arg(&provinces)
        .arg("--complaints")
        .arg(&complaints)
        .arg("--dea-scores")
        .arg(manual.join("dea_scores.csv"))
        .arg("--clusters")
        .arg(manual.join("clusters.csv"))
        .args(["--rounds", "50", "--max-depth", "3", "--eta", "0.3", "--folds", "5"])
        .args(["--seed", &stage_seed(&summary, "train"), "--out"])
        .arg(&manual)));
    check(&run(bin()
        .arg("explain")
        .arg("--model")
        .arg(manual.join("model.json"))
        .arg("--features")
        .arg(manual.join("features.csv"))
        .arg("--out")
        .arg(&manual)));
    check(&run(bin()
        .arg("causal")
        .arg("--features")
        .arg(manual.join("features.csv"))
        .args(["--method", "cevae,s,t,x,r", "--bootstrap", "50", "--epochs", "20", "--mc-samples", "20"])
        .args(["--seed", &stage_seed(&summary, "causal"), "--out"])
        .arg(&manual)));

    for f in [
        "dea_scores.csv",
        "clusters.csv",
        "cluster_report.json",
        "clusters.svg",
        "features.csv",
        "model.json",
        "cv_report.json",
        "shap.csv",
        "shap_summary.json",
        "shap_summary.svg",
        "archetypes.json",
        "ate_report.json",
    ] {
        assert!(read(&piped.join(f)) == read(&manual.join(f)), "{f} differs");
    }
}
