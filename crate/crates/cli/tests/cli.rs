use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uniam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniam"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CAM_UNIDA_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_spec(dir: &Path) {
    fs::write(dir.join("spec.json"), r#"{"samples_per_class": 30, "feat_dim": 8, "attn_dim": 12}"#).unwrap();
}

fn gen(dir: &Path, out: &str, seed: &str) {
    ok(&uniam(&["gen", "--spec", "spec.json", "--seed", seed, "--out", out], dir));
}

#[test]
fn gen_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    let out = uniam(&["gen", "--spec", "spec.json", "--seed", "4", "--out", "a"], d);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("5 common"));
    gen(d, "b", "4");
    gen(d, "c", "5");
    for f in ["manifest.json", "samples.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
    }
    assert_ne!(fs::read(d.join("a/samples.csv")).unwrap(), fs::read(d.join("c/samples.csv")).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = uniam(&["gen", "--spec", "missing.json", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--help"));
    assert_eq!(uniam(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(uniam(&["sweep", "--axis", "gamma", "--range", "0:1:0.5", "--out", "s.csv"], d).status.code(), Some(1));
    assert_eq!(uniam(&["sweep", "--axis", "beta", "--range", "0:1", "--out", "s.csv"], d).status.code(), Some(1));
    assert_eq!(uniam(&["train", "--data", "x", "--out", "r", "--train.bogus", "1"], d).status.code(), Some(1));
}

#[test]
fn seed_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "flag", "9");
    let env = Command::new(env!("CARGO_BIN_EXE_uniam"))
        .args(["gen", "--spec", "spec.json", "--out", "env"])
        .current_dir(d)
        .env("CAM_UNIDA_SEED", "9")
        .output()
        .unwrap();
    ok(&env);
    assert_eq!(fs::read(d.join("flag/samples.csv")).unwrap(), fs::read(d.join("env/samples.csv")).unwrap());
}

#[test]
fn corrupt_samples_exit_two_naming_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "data", "1");
    let path = d.join("data/samples.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<&str> = lines[6].split(',').collect();
    cells[5] = "oops";
    lines[6] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = uniam(&["train", "--data", "data", "--out", "run", "--train.epochs", "1"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 7"));
}

#[test]
fn diverging_training_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "data", "1");
    let out = uniam(
        &["train", "--data", "data", "--out", "run", "--train.epochs", "2", "--optimizer.base_lr", "1e200"],
        d,
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_score_eval_hist_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "data", "2");
    let before: Vec<Vec<u8>> = ["manifest.json", "samples.csv"].iter().map(|f| fs::read(d.join("data").join(f)).unwrap()).collect();
    ok(&uniam(&["train", "--data", "data", "--out", "run", "--train.epochs", "1"], d));
    let history = fs::read_to_string(d.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for f in ["config.json", "model.json", "checkpoints/epoch_0001.json"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }

    ok(&uniam(
        &["score", "--data", "data", "--model", "run", "--beta", "0.2", "--out", "scores.csv", "--clusters", "clusters.csv"],
        d,
    ));
    let scores = fs::read_to_string(d.join("scores.csv")).unwrap();
    assert!(scores.starts_with("id,w_attn,w_feat,w_t,pseudo_label_attn,pseudo_label_feat,decision"));
    let n_target = scores.lines().count() - 1;
    assert_eq!(n_target, 8 * 30);
    assert_eq!(fs::read_to_string(d.join("clusters.csv")).unwrap().lines().count(), n_target + 1);

    ok(&uniam(&["eval", "--data", "data", "--scores", "scores.csv", "--out", "report.json"], d));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    assert!(report["h_score"].as_f64().unwrap() >= 0.0);

    ok(&uniam(&["hist", "--scores", "scores.csv", "--data", "data", "--bins", "7", "--out", "hist.csv"], d));
    let hist = fs::read_to_string(d.join("hist.csv")).unwrap();
    let mut per_score = std::collections::BTreeMap::<String, usize>::new();
    for line in hist.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        *per_score.entry(c[0].to_string()).or_default() += c[2].parse::<usize>().unwrap() + c[3].parse::<usize>().unwrap();
    }
    assert_eq!(per_score.len(), 3);
    assert!(per_score.values().all(|&n| n == n_target));

    ok(&uniam(&["sweep", "--axis", "beta", "--range", "0.5:1.5:0.1", "--data", "data", "--run", "run", "--out", "sweep.csv"], d));
    let sweep = fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 12);
    assert!(sweep.starts_with("beta,h_score,common_acc,unknown_acc"));

    let after: Vec<Vec<u8>> = ["manifest.json", "samples.csv"].iter().map(|f| fs::read(d.join("data").join(f)).unwrap()).collect();
    assert_eq!(before, after);
    assert_eq!(fs::read_dir(d.join("data")).unwrap().count(), 2);
}

#[test]
fn eval_of_perfect_predictions_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "data", "3");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("data/manifest.json")).unwrap()).unwrap();
    let common: Vec<i64> = manifest["common_classes"].as_array().unwrap().iter().map(|v| v.as_i64().unwrap()).collect();
    let samples = fs::read_to_string(d.join("data/samples.csv")).unwrap();
    let mut csv = String::from("id,w_attn,w_feat,w_t,pseudo_label_attn,pseudo_label_feat,decision\n");
    for line in samples.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        if c[1] != "target" {
            continue;
        }
        let gt: i64 = c[3].parse().unwrap();
        let (w, decision) = if common.contains(&gt) { (0.9, gt.to_string()) } else { (0.1, "unknown".to_string()) };
        let label = gt.max(0);
        csv.push_str(&format!("{},{w},{w},{w},{label},{label},{decision}\n", c[0]));
    }
    fs::write(d.join("perfect.csv"), csv).unwrap();
    ok(&uniam(&["eval", "--data", "data", "--scores", "perfect.csv", "--out", "report.json"], d));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["h_score"].as_f64(), Some(1.0));
    assert_eq!(report["auroc"].as_f64(), Some(1.0));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "data", "6");
    let train = |out: &str, resume: bool| {
        let mut args = vec!["train", "--data", "data", "--out", out, "--train.epochs", "3"];
        if resume {
            args.push("--resume");
        }
        ok(&uniam(&args, d));
    };
    train("full", false);
    train("cut", false);
    let cut = d.join("cut");
    fs::remove_file(cut.join("checkpoints/epoch_0003.json")).unwrap();
    fs::remove_file(cut.join("checkpoints/epoch_0002.json")).unwrap();
    fs::remove_file(cut.join("model.json")).unwrap();
    fs::write(cut.join("history.csv"), "truncated\n").unwrap();
    train("cut", true);
    for f in ["history.csv", "model.json", "checkpoints/epoch_0003.json"] {
        assert_eq!(
            fs::read(d.join("full").join(f)).unwrap(),
            fs::read(cut.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "data", "8");
    ok(&uniam(&["--threads", "1", "train", "--data", "data", "--out", "one", "--train.epochs", "2"], d));
    ok(&uniam(&["--threads", "4", "train", "--data", "data", "--out", "four", "--train.epochs", "2"], d));
    assert_eq!(fs::read(d.join("one/model.json")).unwrap(), fs::read(d.join("four/model.json")).unwrap());
}

#[test]
fn config_file_supplies_paths_and_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_spec(d);
    gen(d, "data", "2");
    fs::write(d.join("run.json"), r#"{"data": "data", "out": "run", "train": {"epochs": 1, "beta": 0.3}}"#).unwrap();
    ok(&uniam(&["train", "--config", "run.json", "--train.seed", "12"], d));
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs"], 1);
    assert_eq!(cfg["beta"], 0.3);
    assert_eq!(cfg["seed"], 12);
    assert_eq!(uniam(&["train", "--config", "nope.json"], d).status.code(), Some(1));
}
