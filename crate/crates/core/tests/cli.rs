use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dmcm_core::experiments::{a1, Exclusion, ExperimentConfig};
use dmcm_core::meta::Method;

fn dmcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmcm"))
        .args(args)
        .env_remove("DMCM_WORKERS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny() -> ExperimentConfig {
    let mut cfg = a1(Method::Dmcm, 5, Exclusion::None {});
    cfg.network.hidden = vec![8];
    cfg.train.inner_steps = 1;
    cfg.train.tasks_per_step = 4;
    cfg.train.warmup = 1;
    cfg.train.adapt_sweeps = 1;
    cfg.budget = 6;
    cfg.eval_every = 3;
    cfg.eval_tasks = 4;
    cfg.test_points = 10;
    cfg.seeds = vec![0, 1];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, toml::to_string(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_outputs_and_eval_reproduces_the_last_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    let o = dmcm(&["train", "--config", &cfg, "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "metrics.csv", "curves.svg", "checkpoint.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("method,seed,meta_step,mean_mse,ci95,trial,wall_time_s\n"));

    let ev = dir.path().join("ev");
    let o = dmcm(&["eval", "--resume", s(&out.join("checkpoint.json")), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = fs::read_to_string(ev.join("eval.csv")).unwrap();
    // Evaluating the saved model on the frozen set gives the final curve rows again.
    let finals: Vec<&str> = csv.lines().filter(|l| l.contains(",6,")).collect();
    assert_eq!(eval.lines().skip(1).collect::<Vec<_>>(), finals);
}

#[test]
fn worker_count_does_not_change_the_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(dmcm(&["train", "--config", &cfg, "--out", s(&a), "--workers", "1"]).status.success());
    assert!(dmcm(&["train", "--config", &cfg, "--out", s(&b), "--workers", "2"]).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("o");
    assert!(dmcm(&["train", "--config", &cfg, "--out", s(&out), "--seed", "9"]).status.success());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("9")));
}

#[test]
fn config_and_checkpoint_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny());
    assert!(dmcm(&["train", "--config", &cfg, "--out", s(&out)]).status.success());
    let ck = out.join("checkpoint.json");

    let o = dmcm(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--config"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(&cfg).unwrap() + "\nbogus = 1\n").unwrap();
    let bad_top = dir.path().join("bad_top.toml");
    fs::write(&bad_top, "bogus = 1\n".to_string() + &fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(dmcm(&["train", "--config", s(&bad_top), "--out", s(&dir.path().join("x"))]).status.code(), Some(1));
    assert_eq!(dmcm(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]).status.code(), Some(1));

    let mut zero = tiny();
    zero.budget = 0;
    let o = dmcm(&["train", "--config", &write_config(dir.path(), &zero)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("budget"), "{}", stderr(&o));

    // Resuming with a different hidden width names the mismatched layer.
    let mut wide = tiny();
    wide.network.hidden = vec![9];
    let o = dmcm(&["train", "--config", &write_config(dir.path(), &wide), "--resume", s(&ck), "--out", s(&dir.path().join("w"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("layer 0 weight"), "{}", stderr(&o));

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ck).unwrap()).unwrap();
    v["version"] = 99.into();
    let old = dir.path().join("old.json");
    fs::write(&old, v.to_string()).unwrap();
    let o = dmcm(&["eval", "--resume", s(&old), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("99"), "{}", stderr(&o));

    let o = dmcm(&["mislabel", "--resume", s(&ck), "--out", s(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train"));

    assert_eq!(dmcm(&["eval", "--out", s(&dir.path().join("e"))]).status.code(), Some(1));
    assert_eq!(dmcm(&["train", "--config", &cfg, "--workers", "0"]).status.code(), Some(1));
    assert_eq!(dmcm(&["zeroshot", "--restrict-amp", "5:1"]).status.code(), Some(1));
    assert_eq!(dmcm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dmcm(&["train", "--config", s(&dir.path().join("missing.toml"))]).status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two_after_writing_the_diagnostic_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.inner_lr = 1e150;
    cfg.train.inner_steps = 3;
    cfg.seeds = vec![0];
    let out = dir.path().join("o");
    let o = dmcm(&["train", "--config", &write_config(dir.path(), &cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().last().unwrap().contains("NaN"), "{csv}");
}

#[test]
fn gradcheck_passes() {
    let o = dmcm(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck passed"));
}

#[test]
fn help_exits_cleanly() {
    let o = dmcm(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["train", "eval", "sweep-ood", "zeroshot", "mislabel", "ncontext", "param-ablation", "timing", "gradcheck"] {
        assert!(text.contains(sub), "{sub}");
    }
}

fn study(dir: &Path, extra: &str) -> String {
    let p = dir.join("study.toml");
    fs::write(
        &p,
        format!("budget = 2\neval_every = 1\neval_tasks = 2\ntest_points = 5\nseeds = [0]\n{extra}"),
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn study_commands_write_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &str, &str); 4] = [
        ("mislabel", "rates = [0.0, 0.5]\n", "summary.json"),
        ("sweep-ood", "fractions = [0.4]\nreport_steps = [2]\n", "summary.json"),
        ("zeroshot", "pairs = 3\n", "summary.json"),
        ("timing", "timing_steps = 1\nadapt_tasks = 2\n", "timing.json"),
    ];
    for (cmd, extra, file) in cases {
        let out = dir.path().join(cmd);
        let o = dmcm(&[cmd, "--config", &study(dir.path(), extra), "--out", s(&out)]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(file)).unwrap()).unwrap();
        assert!(!v.is_null(), "{cmd}");
        assert!(out.join("manifest.json").exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mislabel/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    let timing: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("timing/timing.json")).unwrap()).unwrap();
    assert_eq!(timing.as_array().unwrap().len(), 5);
}
