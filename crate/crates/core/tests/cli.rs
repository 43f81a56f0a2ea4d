//! Drives the `meshseg` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn meshseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshseg"))
        .args(args)
        .env_remove("MESHSEG_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = meshseg(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", stderr(&out));
    stdout(&out)
}

fn generate(path: &Path, extra: &[&str]) -> String {
    let p = path.to_str().unwrap();
    let mut args = vec![
        "generate",
        "--subjects",
        "10",
        "--nodes",
        "60",
        "--seed",
        "3",
        "--hops",
        "1",
        "--feature-normalization",
        "column_mean",
        "-o",
        p,
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

/// A short schedule so CLI training finishes in seconds.
const TINY_CONFIG: &str = r#"{
  "folds": 3,
  "seed": 5,
  "train": {"batch_size": 2, "stage1_patience": 2, "stage1_max_epochs": 3, "stage2_epochs": 1}
}"#;

#[test]
fn generate_is_deterministic_and_reports_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let text = generate(&a, &[]);
    generate(&b, &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(text.contains("subjects: 10"), "{text}");
    assert!(text.contains("nodes: 60"), "{text}");
    assert!(text.contains("class balance: background"), "{text}");

    let c = dir.path().join("c.json");
    ok(&[
        "generate",
        "--subjects",
        "10",
        "--nodes",
        "60",
        "--seed",
        "4",
        "--hops",
        "1",
        "-o",
        c.to_str().unwrap(),
    ]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn too_few_subjects_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.json");
    let out = meshseg(&["generate", "--subjects", "5", "-o", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("at least 10 subjects"),
        "{}",
        stderr(&out)
    );
    assert!(!path.exists());
}

#[test]
fn register_recovers_logged_misalignment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("moved.json");
    let text = generate(&path, &["--misalign-seed", "8"]);
    assert!(text.contains("isometries:"), "{text}");
    let log = std::fs::read_to_string(dir.path().join("moved.json.isometries")).unwrap();
    assert_eq!(log.lines().count(), 10);

    let out = ok(&[
        "register",
        "--data",
        path.to_str().unwrap(),
        "--ref",
        "0",
        "--iters",
        "5",
        "--subjects",
        "0,3",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6, "{out}");
    assert!(lines[0].starts_with("subject 0 det "), "{out}");
    assert!(lines[3].starts_with("subject 3 det "), "{out}");
    assert_eq!(lines[1].split_whitespace().count(), 13, "{out}");
    let rms: Vec<f64> = lines[5]
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(rms.len(), 6);
    // the meshes differ by a small non-rigid deformation only
    assert!(rms[0] > 0.1 && rms[5] < 0.05, "{rms:?}");
    assert!(rms.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{rms:?}");

    let bad = meshseg(&["register", "--data", path.to_str().unwrap(), "--ref", "10"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_then_evaluate_reproduces_the_test_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds.json");
    generate(&data, &[]);
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out_dir = dir.path().join("run");
    let text = ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--model",
        "gnn",
        "--fold",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    for file in ["checkpoint.json", "history.csv", "predictions.csv"] {
        assert!(out_dir.join(file).is_file(), "{file}");
    }
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(
        history.starts_with("epoch,stage,train_loss,val_loss\n0,init,"),
        "{history}"
    );

    let preds = std::fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    let mut test: Vec<String> = preds
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    test.dedup();
    let trained = text
        .lines()
        .find_map(|l| l.strip_prefix("test Jaccard: "))
        .unwrap()
        .to_string();

    let eval_preds = dir.path().join("eval.csv");
    let evaluated = ok(&[
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint.json").to_str().unwrap(),
        "--subjects",
        &test.join(","),
        "--predictions",
        eval_preds.to_str().unwrap(),
    ]);
    let scores = evaluated
        .lines()
        .find_map(|l| l.strip_prefix("Jaccard: "))
        .unwrap();
    assert_eq!(scores, trained);
    let labels = |text: &str, col: usize| -> Vec<String> {
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(col).unwrap().to_string())
            .collect()
    };
    assert_eq!(
        labels(&std::fs::read_to_string(&eval_preds).unwrap(), 2),
        labels(&preds, 3)
    );
}

#[test]
fn experiment_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds.json");
    generate(&data, &[]);
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out_dir = dir.path().join("exp");
    let text = ok(&[
        "experiment",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--models",
        "mlp,egnn",
        "--conditions",
        "aligned,misaligned",
        "--no-checkpoints",
        "--dice",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        text.contains("aligned meshes") && text.contains("misaligned meshes"),
        "{text}"
    );
    assert!(text.contains("Dice:"), "{text}");
    for file in [
        "report.txt",
        "report.csv",
        "folds.csv",
        "report_dice.csv",
        "run.log",
        "config.json",
        "predictions/egnn_misaligned.csv",
        "history/mlp_aligned_fold2.csv",
    ] {
        assert!(out_dir.join(file).is_file(), "{file}");
    }
    assert!(!out_dir.join("checkpoints").exists());
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(
        csv.starts_with("model,condition,area,mean_pct,std_pct,folds\n"),
        "{csv}"
    );
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    let log = std::fs::read_to_string(out_dir.join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(saved["folds"], 3);
    assert_eq!(saved["save_checkpoints"], false);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds.json");
    generate(&data, &[]);
    let d = data.to_str().unwrap();

    let egnn_nocoord = meshseg(&[
        "experiment",
        "--data",
        d,
        "--models",
        "egnn",
        "--conditions",
        "nocoord",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(
        egnn_nocoord.status.code(),
        Some(2),
        "{}",
        stderr(&egnn_nocoord)
    );

    let missing = meshseg(&[
        "evaluate",
        "--data",
        d,
        "--checkpoint",
        dir.path().join("none.json").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(3), "{}", stderr(&missing));

    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, "{\"num_nodes\": 3").unwrap();
    let out = meshseg(&["register", "--data", corrupt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("corrupt.json"), "{}", stderr(&out));

    let unknown = meshseg(&["experiment", "--conditions", "sideways"]);
    assert_eq!(unknown.status.code(), Some(2));
}
