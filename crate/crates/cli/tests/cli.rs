use std::path::Path;
use std::process::{Command, Output};

use asnet_core::agents::Architecture;
use asnet_core::env::EnvKind;
use asnet_core::harness::ExperimentConfig;

fn asnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("asnet runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write_config(dir: &Path, hypothesis: Architecture) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::new(EnvKind::Ghostrun, hypothesis);
    cfg.ghostrun.grid_h = 9;
    cfg.ghostrun.grid_w = 9;
    cfg.ghostrun.n_agents = 2;
    cfg.ghostrun.max_steps = 10;
    cfg.episodes = 3;
    cfg.eval_window = 2;
    let p = dir.join(format!("{hypothesis}.json"));
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn train_eval_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for h in [Architecture::H1, Architecture::H5_4] {
        let config = write_config(tmp.path(), h);
        let out = tmp.path().join(h.name());
        let res = asnet(&["train", "--config", path(&config), "--seeds", "1,2", "--out", path(&out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let stdout = String::from_utf8(res.stdout).unwrap();
        assert_eq!(stdout.lines().count(), 3, "{stdout}");
        runs.push(out);
    }

    let ck = runs[1].join("seed_2/checkpoint.json");
    let eval = |mode: &str| {
        let res = asnet(&["eval", "--checkpoint", path(&ck), "--mode", mode, "--episodes", "3", "--seed", "4"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        serde_json::from_slice::<serde_json::Value>(&res.stdout).unwrap()
    };
    let iid = eval("iid");
    assert_eq!(iid["rewards"].as_array().unwrap().len(), 3);
    assert!(iid["mean"].as_f64().unwrap() <= -10.0);
    assert_eq!(iid, eval("iid"));
    assert_ne!(iid["rewards"], eval("ood")["rewards"]);

    let cmp = tmp.path().join("cmp");
    let res = asnet(&["compare", path(&runs[0]), path(&runs[1]), "--emit", "csv,svg", "--out", path(&cmp)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    for svg in ["train_curve.svg", "iid_box.svg", "ood_box.svg"] {
        assert!(cmp.join(svg).exists());
    }

    let csv_only = tmp.path().join("csv_only");
    let res = asnet(&["compare", path(&runs[0]), "--emit", "csv", "--out", path(&csv_only)]);
    assert!(res.status.success());
    assert!(csv_only.join("comparison.csv").exists());
    assert!(!csv_only.join("iid_box.svg").exists());
}

#[test]
fn continual_flag_and_episodes_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), Architecture::H1);
    let out = tmp.path().join("run");
    let res = asnet(&["train", "--config", path(&config), "--continual", "--seeds", "3", "--out", path(&out)]);
    assert!(res.status.success());
    let saved = ExperimentConfig::load(&out.join("experiment.json")).unwrap();
    assert!(saved.continual);
    assert_eq!(saved.seeds, vec![3]);

    let ck = out.join("seed_3/checkpoint.json");
    let res = asnet(&["eval", "--checkpoint", path(&ck), "--mode", "iid", "--episodes", "0"]);
    assert!(res.status.success());
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v["mean"].is_null() && v["std"].is_null());
}

#[test]
fn gradcheck_passes() {
    let res = asnet(&["gradcheck"]);
    assert!(res.status.success());
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.trim_end().ends_with("PASS"), "{stdout}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| asnet(args).status.code();

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"task": "ghostrun", "hypothesis": "H6"}"#).unwrap();
    assert_eq!(code(&["train", "--config", path(&bad), "--out", path(tmp.path())]), Some(2));

    let config = write_config(tmp.path(), Architecture::H1);
    assert_eq!(code(&["train", "--config", path(&config)]), Some(2), "no output directory");
    let missing = tmp.path().join("missing.json");
    assert_eq!(code(&["train", "--config", path(&missing), "--out", path(tmp.path())]), Some(3));

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let under_file = blocker.join("run");
    assert_eq!(code(&["train", "--config", path(&config), "--out", path(&under_file)]), Some(3));

    assert_eq!(code(&["eval", "--checkpoint", path(&missing), "--mode", "iid", "--episodes", "1"]), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", path(&bad), "--mode", "iid", "--episodes", "1"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", path(&bad), "--mode", "sideways", "--episodes", "1"]), Some(2));
    assert_eq!(code(&["compare", path(tmp.path()), "--out", path(&tmp.path().join("c"))]), Some(3));
    assert_eq!(code(&["gradcheck", "--instances", "0"]), Some(4));
}
