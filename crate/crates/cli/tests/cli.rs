use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 2
out_dir = "out"
[task]
kind = "push_plate"
[data]
robot_demos = 2
human_demos = 4
validation_demos = 2
[classifier]
steps = 40
hidden = 8
n_draws = 2
[policy.train]
steps = 20
hidden = 8
depth = 1
[eval]
n_rollouts = 1
seeds = [0]
[analysis]
ks = [0, 100]
"#;

fn xdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdiff"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    serde_json::from_str(lines[0]).unwrap()
}

fn setup(text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), text).unwrap();
    dir
}

#[test]
fn unknown_key_fails_with_one_json_line() {
    let dir = setup(&format!("{TINY}bogus = 3\n"));
    let o = xdiff(dir.path(), &["gen-data", "--config", "c.toml"]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn out_of_order_command_names_its_producer() {
    let dir = setup(TINY);
    assert!(xdiff(dir.path(), &["gen-data", "--config", "c.toml"]).status.success());
    assert!(dir.path().join("out/data/robot_train.jsonl").exists());
    let o = xdiff(dir.path(), &["annotate", "--config", "c.toml"]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().unwrap().contains("train-classifier"));
}

#[test]
fn pipeline_with_out_override_and_jobs() {
    let dir = setup(TINY);
    let o = xdiff(dir.path(), &["pipeline", "--config", "c.toml", "--out", "elsewhere", "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("elsewhere/eval/report.csv").exists());
    assert!(!dir.path().join("out").exists());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("xdiffusion"), "{stdout}");
    let o = xdiff(dir.path(), &["eval", "--config", "c.toml", "--out", "elsewhere", "--regime", "robot"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1);
}

#[test]
fn bad_regime_name_is_a_config_error() {
    let dir = setup(TINY);
    let o = xdiff(dir.path(), &["train-policy", "--config", "c.toml", "--regime", "psychic"]);
    assert_eq!(error_line(&o)["error"], "config");
}
