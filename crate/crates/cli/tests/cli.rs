use std::path::Path;
use std::process::{Command, Output};

fn faithful(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faithful")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy_csv(path: &Path) {
    let mut text = String::from("x0,x1,y0\n");
    for i in 0..40 {
        let x0 = i as f64 / 40.0;
        let x1 = ((i * 7) % 11) as f64 / 11.0;
        let noise = if i % 2 == 0 { 0.1 } else { -0.1 } * (1.0 + x0);
        text.push_str(&format!("{x0},{x1},{}\n", (3.0 * x0).sin() + x1 + noise));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn verify_exits_zero_for_faithful_and_two_for_a_control() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = faithful(&["verify", "--epochs", "5", "--seeds", "0", "--out", out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("PASS"));
    assert!(dir.path().join("results.json").exists());

    let bad = faithful(&["verify", "--epochs", "5", "--seeds", "0", "--loss", "conventional", "--out", out]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).contains("diverged at epoch 1"));
}

#[test]
fn configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = faithful(&["tabular", "--out", out]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let bad_model = faithful(&["verify", "--models", "nonsense", "--out", out]);
    assert_eq!(bad_model.status.code(), Some(1));
}

#[test]
fn tabular_run_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    toy_csv(&csv);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "hidden = 8\nepochs = 30\npatience = 5\nmodels = unit-variance, conventional, faithful\n").unwrap();
    let out = dir.path().join("out");
    let run = faithful(&[
        "tabular",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--targets",
        "y0",
        "--folds",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let csv_out = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv_out.lines().count(), 4);

    let replay = faithful(&["replay", out.join("results.json").to_str().unwrap()]);
    assert_eq!(replay.status.code(), Some(0));
    let tallies = |s: &str| s.lines().filter(|l| l.starts_with("wins/ties")).map(String::from).collect::<Vec<_>>();
    assert_eq!(tallies(&stdout(&replay)), tallies(&stdout(&run)));
    assert!(!tallies(&stdout(&run)).is_empty());
}
