use std::path::Path;
use std::process::{Command, Output};

fn varwm(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_varwm"));
    c.args(args);
    match env_out {
        Some(p) => c.env("VARWM_OUT", p),
        None => c.env_remove("VARWM_OUT"),
    };
    c.output().expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = ["--epochs", "2", "--width", "8", "--depth", "1", "--ctx-dim", "2", "--batch-size", "8", "--train-horizon", "4"];

#[test]
fn generate_train_rollout_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ok(&varwm(
        &["generate", "--families", "uniform,controlled_oscillator", "--n-train", "4", "--n-val", "1", "--n-test", "2", "--seed", "3", "--out", s(&data)],
        None,
    ));
    assert!(out.contains("uniform: train 4 val 1 test 2"), "{out}");
    assert!(data.join("controlled_oscillator.jsonl").exists());
    assert!(data.join("config.json").exists());

    let ds = data.join("uniform.jsonl");
    let run = dir.path().join("train");
    let mut args = vec!["train", "--dataset", s(&ds), "--variant", "identity_mass", "--out", s(&run), "--deterministic"];
    args.extend(TINY);
    let out = ok(&varwm(&args, None));
    assert!(out.contains("to epoch 2"), "{out}");
    let ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["config"]["variant"], "identity_mass");
    assert_eq!(ck["label"], "identity_mass");

    let roll = dir.path().join("roll");
    ok(&varwm(&["rollout", "--checkpoint", s(&run.join("checkpoint.json")), "--dataset", s(&ds), "--index", "4", "--horizon", "16", "--out", s(&roll)], None));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(roll.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["horizon"], 16);
    assert!(metrics["r_stat"].as_f64().unwrap().is_finite());
    let series = std::fs::read_to_string(roll.join("series.jsonl")).unwrap();
    assert_eq!(series.lines().count(), 16);

    let sim = dir.path().join("sim");
    ok(&varwm(
        &[
            "rollout",
            "--checkpoint",
            s(&run.join("checkpoint.json")),
            "--family",
            "uniform",
            "--param",
            "x0=0",
            "--param",
            "y0=1",
            "--param",
            "speed=2",
            "--param",
            "direction=0.1",
            "--n-steps",
            "40",
            "--out",
            s(&sim),
        ],
        None,
    ));
    assert!(sim.join("predicted.jsonl").exists());
}

#[test]
fn stored_config_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&varwm(&["generate", "--families", "controlled_oscillator", "--n-train", "4", "--n-val", "1", "--n-test", "0", "--out", s(&data)], None));
    let a = dir.path().join("a");
    let ds = data.join("controlled_oscillator.jsonl");
    let mut args = vec!["train", "--dataset", s(&ds), "--seed", "5", "--deterministic", "--out", s(&a)];
    args.extend(TINY);
    ok(&varwm(&args, None));
    let b = dir.path().join("b");
    ok(&varwm(&["--config", s(&a.join("config.json")), "--out", s(&b)], None));
    let ca = std::fs::read(a.join("checkpoint.json")).unwrap();
    let cb = std::fs::read(b.join("checkpoint.json")).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(std::fs::read(a.join("config.json")).unwrap(), std::fs::read(b.join("config.json")).unwrap());
}

#[test]
fn ablate_then_report_with_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate",
        "--seeds",
        "0,1",
        "--variants",
        "full,no_context",
        "--horizon",
        "8",
        "--solver-sweep",
        "1,8",
        "--gd-budgets",
        "0,2",
        "--n-train",
        "4",
        "--n-val",
        "1",
        "--n-test",
        "2",
    ];
    args.extend(TINY);
    let out = ok(&varwm(&args, Some(dir.path())));
    assert!(out.contains("## architecture"), "{out}");
    let run = dir.path().join("ablate");
    assert!(run.join("rows.jsonl").exists());
    assert!(run.join("full_seed1.json").exists());
    let out = ok(&varwm(&["report", "--dir", s(&run)], None));
    assert!(out.contains("## solver"));
    assert!(out.contains("aggregates match rows within 0.0e0"), "{out}");
}

#[test]
fn failures_exit_with_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let o = varwm(&["train", "--dataset", s(&dir.path().join("absent.jsonl")), "--out", s(dir.path())], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = varwm(&["train", "--dataset", "x.jsonl", "--variant", "bogus", "--out", s(dir.path())], None);
    assert_eq!(o.status.code(), Some(2));
    let o = varwm(&["generate", "--families", "bogus", "--out", s(dir.path())], None);
    assert_eq!(o.status.code(), Some(2));
    let o = varwm(&["report", "--dir", s(&dir.path().join("none"))], None);
    assert_eq!(o.status.code(), Some(3));
    let o = varwm(&[], None);
    assert_eq!(o.status.code(), Some(2));
}
