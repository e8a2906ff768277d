use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"seed = 5

[data.synthetic]
samples = 160

[model]
latent_dim = 8

[train]
max_epochs = 3
batch_size = 32

[eval]
folds = 2
scenarios = ["none"]
"#;

fn mvl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), config).unwrap();
    dir
}

fn error_record(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr holds one JSON record")
}

#[test]
fn evaluate_twice_gives_identical_summary() {
    let dir = setup(SMALL);
    for run in ["a", "b"] {
        let out = mvl(dir.path(), &["evaluate", "--config", "c.toml", "--out", run]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a/summary.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/summary.json")).unwrap();
    assert_eq!(a, b);
    let summary: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["config"]["data"]["synthetic"]["samples"], 160);
    assert!(summary["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .all(|m| m["scenario"] == "none"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = setup(SMALL);
    assert!(mvl(
        dir.path(),
        &["evaluate", "--config", "c.toml", "--out", "o", "--seed", "99"]
    )
    .status
    .success());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 99);
    assert_eq!(summary["config"]["seed"], 99);
}

#[test]
fn ablate_emits_six_rows() {
    let dir = setup(SMALL);
    let out = mvl(dir.path(), &["ablate", "--config", "c.toml", "--out", "o"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(dir.path().join("o/ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let pairs: Vec<(String, String)> = rows.iter().map(|r| (r[0].to_string(), r[1].to_string())).collect();
    for aug in ["none", "sensd", "com"] {
        for level in ["input", "feature"] {
            assert!(pairs.contains(&(aug.to_string(), level.to_string())), "{aug} {level}");
        }
    }
}

#[test]
fn gradcheck_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvl(dir.path(), &["gradcheck", "--out", "g", "--seeds", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("g/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(record["passed"], true);
    assert!(record["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn train_then_evaluate_and_sweep_a_saved_model() {
    let dir = setup(&SMALL.replace(r#"["none"]"#, r#"["none", "only_missing"]"#));
    assert!(mvl(dir.path(), &["train", "--config", "c.toml", "--out", "m"])
        .status
        .success());
    assert!(dir.path().join("m/train_log.jsonl").exists());
    let out = mvl(
        dir.path(),
        &[
            "evaluate",
            "--config",
            "c.toml",
            "--out",
            "e",
            "--model",
            "m/model.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("e/report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("only_missing,radar,1.0,f1")));

    let cfg = SMALL.replace(
        "[eval]\n",
        "[eval]\ntop_view = \"radar\"\nfractions = [0.0, 0.5, 1.0]\n",
    );
    std::fs::write(dir.path().join("s.toml"), cfg).unwrap();
    let out = mvl(
        dir.path(),
        &["sweep", "--config", "s.toml", "--out", "s", "--model", "m/model.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    for p in ["0.0", "0.5", "1.0"] {
        assert!(
            sweep
                .lines()
                .any(|l| l.starts_with(&format!("fraction,radar,{p},deformation"))),
            "{p}"
        );
    }
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = setup(SMALL);
    assert!(mvl(dir.path(), &["synth", "--config", "c.toml", "--out", "d"])
        .status
        .success());
    let ds = mvl_core::data::load_dataset(&dir.path().join("d/manifest.json")).unwrap();
    assert_eq!(ds.len(), 160);
    assert_eq!(ds.views().len(), 3);
}

#[test]
fn config_errors_exit_2() {
    let dir = setup("[train]\npatience = 0\n");
    let out = mvl(dir.path(), &["train", "--config", "c.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "config");

    let out = mvl(dir.path(), &["train", "--config", "absent.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "file_not_found");

    std::fs::write(
        dir.path().join("v.toml"),
        SMALL.replace("[eval]\n", "[eval]\nviews = [\"sonar\"]\n"),
    )
    .unwrap();
    let out = mvl(dir.path(), &["evaluate", "--config", "v.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "unknown_view");
}

#[test]
fn runtime_errors_exit_3() {
    let dir = setup(SMALL);
    let out = mvl(
        dir.path(),
        &[
            "evaluate",
            "--config",
            "c.toml",
            "--out",
            "o",
            "--model",
            "missing.json",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let record = error_record(&out);
    assert_eq!(record["error"], "file_not_found");
    assert!(record["message"].as_str().unwrap().contains("missing.json"));
}
