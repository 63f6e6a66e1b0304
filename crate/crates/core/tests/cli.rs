use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowmatch::cli::commands::read_labels;
use flowmatch::data::load_table;
use flowmatch::em::ModelDocument;

fn flowmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowmatch")).args(args).env_remove("FLOWMATCH_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = flowmatch(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TOY: &str = r#"
seed = 9

[pattern]
common = ["c"]
specific1 = ["s1"]
specific2 = ["s2"]

[model]
latent_dim = 1
means = [[-0.5, -3.0, -3.0], [0.5, 3.0, 3.0]]

[split]
n1 = 400
n2 = 400
n_eval = 200

[simulate]
generator = "toy"
n = 1000
"#;

fn toy_config(dir: &Path) -> String {
    let p = dir.join("toy.toml");
    fs::write(&p, TOY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let out = flowmatch(&["--config", &cfg, "--out", &s(tmp.path()), "--set", "input.file1=\"/nonexistent/a.csv\"", "match"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/a.csv"));

    let out = flowmatch(&["--config", &cfg, "--out", &s(tmp.path()), "fit"]);
    assert_eq!(out.status.code(), Some(2), "file1 is not configured");
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    for set in ["em.tolerance=1", "em.tol=-1", "model.latent_dim=0", "output.threads=0"] {
        let out = flowmatch(&["--config", &cfg, "--set", set, "simulate"]);
        assert_eq!(out.status.code(), Some(2), "{set}");
    }
    let out = flowmatch(&["--config", &cfg, "--out", &s(tmp.path()), "simulate"]);
    assert!(out.status.success());
    let src = format!("input.source=\"{}\"", s(&tmp.path().join("data.csv")));
    let out = flowmatch(&["--config", &cfg, "--out", &s(tmp.path()), "--set", &src, "--set", "model.latent_dim=3", "evaluate"]);
    assert_eq!(out.status.code(), Some(2), "q must stay below d");
    let out = flowmatch(&["--config", "/nonexistent.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degenerate_histogram_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("flat.csv");
    let mut text = String::from("a,b\n");
    for i in 0..50 {
        text.push_str(&format!("1.5,{i}\n"));
    }
    fs::write(&data, text).unwrap();
    let out = flowmatch(&["--out", &s(tmp.path()), "--set", &format!("input.source=\"{}\"", s(&data)), "histogram"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_split_fit_impute() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = toy_config(root);
    let sim = root.join("sim");
    ok(&["--config", &cfg, "--out", &s(&sim), "simulate"]);
    let data = load_table::<f64>(&sim.join("data.csv"), "").unwrap();
    assert_eq!((data.nrows(), data.ncols()), (1000, 3));
    let truth = read_labels(&sim.join("labels.csv")).unwrap();
    assert_eq!(truth.len(), 1000);
    assert!(truth.iter().all(|&l| l < 2));

    let split = root.join("split");
    let src = format!("input.source=\"{}\"", s(&sim.join("data.csv")));
    let stdout = ok(&["--config", &cfg, "--out", &s(&split), "--set", &src, "split"]);
    assert!(stdout.contains("file1: 400 rows"), "{stdout}");
    let file1 = load_table::<f64>(&split.join("file1.csv"), "").unwrap();
    assert!(!file1.is_fully_observed());
    assert!((0..file1.nrows()).all(|r| !file1.is_observed(r, 2)));

    let files = [
        "--set".to_string(),
        format!("input.file1=\"{}\"", s(&split.join("file1.csv"))),
        "--set".to_string(),
        format!("input.file2=\"{}\"", s(&split.join("file2.csv"))),
    ];
    let files: Vec<&str> = files.iter().map(String::as_str).collect();
    let fitted = root.join("fit");
    let mut args = vec!["--config", &cfg, "--out", fitted.to_str().unwrap()];
    args.extend(&files);
    args.push("fit");
    ok(&args);
    let doc = ModelDocument::load(&fitted.join("model.json")).unwrap();
    let model = doc.to_model::<f64>().unwrap();
    assert_eq!(model.n_components(), 2);
    let provenance = doc.provenance.as_ref().unwrap();
    assert_eq!(provenance["seeds"]["init"], 9);
    assert_eq!(provenance["config"]["model"]["latent_dim"], 1);
    let labels = read_labels(&fitted.join("labels1.csv")).unwrap();
    assert_eq!(labels.len(), 400);
    assert!(fs::read_to_string(fitted.join("labels1.csv")).unwrap().lines().skip(1).all(|l| l.ends_with(",1") || l.ends_with(",2")));

    let imputed = root.join("impute");
    let model_path = format!("input.model=\"{}\"", s(&fitted.join("model.json")));
    let mut args = vec!["--config", &cfg, "--out", imputed.to_str().unwrap(), "--set", &model_path];
    args.extend(&files);
    args.push("impute");
    ok(&args);
    let completed = load_table::<f64>(&imputed.join("completed1.csv"), "").unwrap();
    assert!(completed.is_fully_observed());
    let prov = fs::read_to_string(imputed.join("provenance1.csv")).unwrap();
    assert_eq!(prov.lines().next(), Some("row,donor_row,cluster,fallback"));
    assert_eq!(prov.lines().count(), 401);

    let resolved = fs::read_to_string(imputed.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("latent_dim = 1"), "{resolved}");
}

#[test]
fn plain_method_needs_no_model() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = toy_config(root);
    ok(&["--config", &cfg, "--out", &s(root), "simulate"]);
    ok(&["--config", &cfg, "--out", &s(root), "--set", &format!("input.source=\"{}\"", s(&root.join("data.csv"))), "split"]);
    let out = root.join("nn");
    let sets = [
        format!("input.file1=\"{}\"", s(&root.join("file1.csv"))),
        format!("input.file2=\"{}\"", s(&root.join("file2.csv"))),
        format!("input.truth1=\"{}\"", s(&root.join("truth1.csv"))),
        format!("input.truth2=\"{}\"", s(&root.join("truth2.csv"))),
        format!("input.holdout=\"{}\"", s(&root.join("eval.csv"))),
    ];
    let mut args = vec!["--config", &cfg, "--out", out.to_str().unwrap(), "--set", "impute.method=\"nn\""];
    for x in &sets {
        args.push("--set");
        args.push(x);
    }
    args.push("match");
    let stdout = ok(&args);
    assert!(stdout.contains("KL(file 1)"), "{stdout}");
    assert!(!out.join("model.json").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("match_report.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["method"], "nn");
    assert!(report["result"]["kl"]["file1"]["value"].as_f64().unwrap() > 1.0);
}

#[test]
fn evaluate_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = toy_config(root);
    ok(&["--config", &cfg, "--out", &s(root), "simulate"]);
    let stdout = ok(&[
        "--config",
        &cfg,
        "--out",
        &s(root),
        "--threads",
        "2",
        "--set",
        &format!("input.source=\"{}\"", s(&root.join("data.csv"))),
        "--set",
        "evaluate.repetitions=2",
        "evaluate",
    ]);
    assert!(stdout.contains("cluster-nn"), "{stdout}");
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("kl_table.json")).unwrap()).unwrap();
    assert_eq!(table["result"]["seeds"], serde_json::json!([9, 10]));
    assert!(root.join("kl_table.txt").exists());
}
