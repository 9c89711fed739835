use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "ladder": {"fractions": [0.0, 0.25], "x_emb": false},
  "seeds": [3],
  "eval_episodes": 2,
  "data": {"pretrain_episodes": 1, "finetune_robot_episodes": 2, "finetune_transfer_episodes": 2, "pad": 4},
  "model": {"width": 16, "flow_hidden": 16, "token_positions": 8, "token_rank": 4},
  "pretrain": {"steps": 10, "batch_size": 8},
  "finetune": {"steps": 5, "batch_size": 8},
  "alignment": {"per_class_n": 20, "tsne": {"perplexity": 5.0, "iterations": 30}},
  "bootstrap_resamples": 100
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_xembody"))
        .arg("--config")
        .arg(dir.join("tiny.json"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();

    run(dir, &["gen-data"]);
    let data = dir.join("out/data_s3");
    assert!(data.join("manifest.json").exists());
    assert!(stdout(&run(dir, &["ingest", "--dataset", data.to_str().unwrap()])).contains("0 invalid"));
    run(dir, &["tokenizer-train", "--dataset", data.to_str().unwrap()]);
    assert!(dir.join("out/tokenizer.json").exists());

    let ckpt = stdout(&run(dir, &["pretrain", "--fraction", "0.25"]));
    assert!(ckpt.ends_with("pretrain_f0.25_s3.ckpt"));
    let ft = stdout(&run(
        dir,
        &["finetune", "--checkpoint", &ckpt, "--benchmark", "sort_eggs", "--mix", "with-transfer", "--fraction", "0.25"],
    ));
    assert!(ft.ends_with("finetune_f0.25_sort_eggs_with_human_s3.ckpt"));
    let scores: Vec<f64> = serde_json::from_str(&stdout(&run(dir, &["eval", "--checkpoint", &ft, "--benchmark", "sort_eggs"]))).unwrap();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    run(dir, &["analyze", "--checkpoint", &ft]);
    assert!(dir.join("out/embeddings/finetune_f0.25_sort_eggs_with_human_s3_tsne.csv").exists());

    run(dir, &["sweep", "--quiet"]);
    let results = std::fs::read_to_string(dir.join("out/results.csv")).unwrap();
    assert_eq!(results.lines().next().unwrap(), "fraction,x_emb,mix,benchmark,seed,score");
    assert_eq!(results.lines().count(), 1 + 2 * 2);
    let before = std::fs::read(dir.join("out/summary.json")).unwrap();
    run(dir, &["report"]);
    assert_eq!(std::fs::read(dir.join("out/summary.json")).unwrap(), before);
}

#[test]
fn bad_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    let fail = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_xembody"))
            .arg("--config")
            .arg(dir.join("tiny.json"))
            .args(args)
            .output()
            .unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        String::from_utf8_lossy(&out.stderr).to_string()
    };
    assert!(fail(&["eval", "--checkpoint", "/nonexistent.ckpt", "--benchmark", "sort_eggs"]).contains("Error"));
    std::fs::write(dir.join("bad.json"), "{\"seeds\": [], \"ladder\": {\"fractions\": [0.3]}}").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_xembody"))
        .args(["--config", dir.join("bad.json").to_str().unwrap(), "report"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
