use std::path::Path;
use std::process::{Command, Output};

use commdecode::exact_decoder::DecodedGoals;
use commdecode::state_decoder::Metrics;
use commdecode::demos::demos_from_jsonl;

const SMALL: [&str; 10] = [
    "--set",
    "transition.steps=150",
    "--set",
    "transition.dataset_size=5000",
    "--set",
    "demos.count=2600",
    "--set",
    "decoder.schedule.total_steps=20",
    "--set",
    "decoder.batch_size=64",
];

fn commdecode(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_commdecode"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("COMMDECODE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stage(name: &str, seed: &str, out: &Path) -> Output {
    let mut args = vec![name, "--seed", seed];
    args.extend(SMALL);
    commdecode(&args, out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_upstream_artifact_exits_2_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = stage("train-decoder", "1", dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("qtable.csv"));
}

#[test]
fn config_errors_exit_1_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = commdecode(&["plan", "--seed", "1", "--set", "planner.bogus=3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("planner.bogus"));

    let o = commdecode(&["plan"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"));

    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 4, "decoder": {"batch_size": 0}}"#).unwrap();
    let o = commdecode(&["plan", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("decoder.batch_size"));

    let o = commdecode(&["no-such-stage"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_comes_from_flag_then_environment_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 4}"#).unwrap();
    let show = |env: Option<&str>, flag: Option<&str>| -> u64 {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_commdecode"));
        cmd.args(["show-config", "--config", cfg.to_str().unwrap()]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        match env {
            Some(e) => cmd.env("COMMDECODE_SEED", e),
            None => cmd.env_remove("COMMDECODE_SEED"),
        };
        let o = cmd.output().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(show(None, None), 4);
    assert_eq!(show(Some("7"), None), 7);
    assert_eq!(show(Some("7"), Some("9")), 9);
}

#[test]
fn pipeline_artifacts_are_sound_and_thresholds_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for name in ["plan", "train-transition", "gen-demos", "train-decoder", "decode-exact"] {
        let o = stage(name, "2", out);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }

    let goals = DecodedGoals::from_json(&std::fs::read_to_string(out.join("goals.json")).unwrap()).unwrap();
    let demos = demos_from_jsonl(&std::fs::read_to_string(out.join("demos.jsonl")).unwrap()).unwrap();
    assert_eq!(demos.len(), 2600);
    for d in &demos {
        assert!(goals[&d.message].contains(&d.oracle.as_ref().unwrap().goal));
    }

    // Twenty steps of training cannot reach the headline accuracy.
    let mut args = vec!["eval-decoder", "--assert", "--seed", "2"];
    args.extend(SMALL);
    let o = commdecode(&args, out);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let metrics: Metrics = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.demos, 2600);
    assert!(out.join("heatmap.svg").is_file());
    let o = stage("eval-decoder", "2", out);
    assert!(o.status.success());
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for name in ["plan", "train-transition", "gen-demos"] {
        assert!(stage(name, "5", out).status.success());
    }
    let mut args = vec!["train-decoder", "--seed", "5", "--set", "decoder.learning_rate=1e300"];
    args.extend(SMALL);
    let o = commdecode(&args, out);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn render_heatmaps_rejects_bad_input_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("h.csv");
    let output = dir.path().join("h.svg");
    std::fs::write(&input, "true_gx,true_gy,pred_gx,pred_gy,proportion\n0,0,0,0,1\n0,0,1,0,oops\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_commdecode"))
        .args(["render-heatmaps", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 3"));
    assert!(!output.exists());

    std::fs::write(&input, "true_gx,true_gy,pred_gx,pred_gy,proportion\n0,0,0,0,1\n0,0,1,0,0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_commdecode"))
        .args(["render-heatmaps", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&output).unwrap().contains("true-goal"));
}
