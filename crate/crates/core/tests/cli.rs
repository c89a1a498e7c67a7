use std::path::Path;
use std::process::{Command, Output};

fn derauth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derauth")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let text = format!(
        "[protocol]\nn_cells = 20\nrounds = 4\n\n[sweep]\ntaus_mah = [1.0, 50.0]\nintervals = [1, 100]\n\
         n_measurements = 200\nn_seeds = 2\n\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_verb() {
    let out = derauth(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for verb in [
        "enroll",
        "authenticate",
        "sweep",
        "export-dataset",
        "attack-eval",
        "demo",
    ] {
        assert!(text.contains(verb), "{verb} missing from:\n{text}");
    }
}

#[test]
fn enroll_and_authenticate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = derauth(&["enroll", "--config", &cfg, "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("20 cells, tables identical"));

    let log = dir.path().join("events.jsonl");
    let out = derauth(&[
        "authenticate",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("rounds=4 "), "{}", stdout(&out));
    assert!(stdout(&out).contains("lockstep=true"));
    let events = std::fs::read_to_string(&log).unwrap();
    assert!(events
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    assert!(events.contains("command_authorized"));
}

#[test]
fn replay_adversary_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[adversary]\nmode = \"replay\"\n");
    let out = derauth(&["authenticate", "--config", &cfg, "--rounds", "6"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("accepted=1 "), "{}", stdout(&out));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let csv = dir.path().join("curve.csv");
    let out = derauth(&["sweep", "--config", &cfg, "--out", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("curve,update_interval,tau_mah,reliability_pct,n_seeds,n_attempts")
    );
    // two intervals and the untracked curve, each at two tolerances
    assert_eq!(lines.count(), 6);
}

#[test]
fn export_then_attack_eval_delegates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let data = dir.path().join("crseq.csv");
    let out = derauth(&[
        "export-dataset",
        "--config",
        &cfg,
        "--n",
        "50",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 50);

    let script = dir.path().join("eval.sh");
    std::fs::write(&script, "echo evaluator \"$@\"\n").unwrap();
    let out = derauth(&[
        "attack-eval",
        "--seed",
        "9",
        "--dataset",
        data.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--python",
        "sh",
        "--",
        "--epochs",
        "2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("--dataset") && text.contains("--seed 9 --epochs 2"),
        "{text}"
    );
}

#[test]
fn attack_eval_without_evaluator_explains() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("crseq.csv");
    std::fs::write(&data, "").unwrap();
    let missing = dir.path().join("nowhere.py");
    let out = derauth(&[
        "attack-eval",
        "--dataset",
        data.to_str().unwrap(),
        "--script",
        missing.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("not installed"));

    let out = derauth(&["attack-eval", "--dataset", "/nonexistent.csv"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("export-dataset"));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[ducm]\ntau_mah = -1.0\n");
    let out = derauth(&["enroll", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("tau_mah"), "{}", stderr(&out));

    let cfg = small_config(dir.path(), "[protocol2]\nx = 1\n");
    let out = derauth(&["enroll", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("protocol2"), "{}", stderr(&out));
}

#[test]
fn demo_shows_honest_then_replayed_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = derauth(&["demo", "--config", &cfg, "--seed", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("honest: rounds=5"));
    assert!(text.contains("replay: rounds=5 accepted=1 rejected=4"), "{text}");
}
