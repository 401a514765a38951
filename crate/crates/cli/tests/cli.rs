use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_introplan"));
    c.env_remove("RUST_LOG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Generated data plus a config in `dir`; returns the config path.
fn setup(dir: &Path, mode: &str) -> PathBuf {
    let o = run(
        dir,
        &["gen-data", "--out-dir", "data", "--train", "30", "--calibration", "60", "--test", "40", "--seed", "9"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 9\nmode = \"{mode}\"\ntarget_success = [0.6, 0.7, 0.8, 0.9]\noutput_dir = \"out\"\nmax_in_flight = 4\n\
             [data]\ntrain = \"data/train.jsonl\"\ncalibration = \"data/calibration.jsonl\"\ntest = \"data/test.jsonl\"\n"
        ),
    )
    .unwrap();
    cfg
}

fn pipeline(dir: &Path) {
    for cmd in ["build-kb", "calibrate", "evaluate"] {
        let o = run(dir, &["--config", "run.toml", cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn full_pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "conformal_single");
    pipeline(dir.path());
    let out = dir.path().join("out");
    for f in ["kb.jsonl", "calibration.json", "run_log.jsonl", "metrics.csv", "classification.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(out.join("run_log.jsonl")).unwrap().lines().count(), 40);

    let o = run(dir.path(), &["--config", "run.toml", "sweep"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 4);
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("kb_size,target_success,epsilon_hat,q_hat,SR,"));
}

#[test]
fn evaluation_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        setup(d, "conformal_multi");
        pipeline(d);
    }
    for f in ["run_log.jsonl", "metrics.csv", "classification.csv", "calibration.json"] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn validation_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "target_success = [1.5]\n").unwrap();
    assert_eq!(run(dir.path(), &["--config", "bad.toml", "evaluate"]).status.code(), Some(3));

    let o = run(dir.path(), &["--offline", "--backend", "openai", "build-kb"]);
    assert_eq!(o.status.code(), Some(3));

    let o = run(dir.path(), &["verify-coverage", "--trials", "50"]);
    assert_eq!(o.status.code(), Some(3));

    setup(dir.path(), "conformal_single");
    run(dir.path(), &["--config", "run.toml", "build-kb"]);
    std::fs::write(dir.path().join("data/calibration.jsonl"), "").unwrap();
    let o = run(dir.path(), &["--config", "run.toml", "calibrate"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn backend_failures_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "conformal_single");
    std::fs::write(dir.path().join("empty.cassette.jsonl"), "").unwrap();
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = text.replacen("seed = 9\n", "seed = 9\nbackend = \"replay\"\n", 1);
    text.push_str("[cassette]\npath = \"empty.cassette.jsonl\"\n");
    std::fs::write(&cfg, text).unwrap();
    let o = run(dir.path(), &["--config", "run.toml", "build-kb"]);
    // every instance misses the cassette, so the build has nothing to keep
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(dir.path(), &["--config", "run.toml", "--backend", "synthetic", "build-kb"]);
    assert!(o.status.success());
    let o = run(dir.path(), &["--config", "run.toml", "calibrate"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

fn run_log(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("out/run_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn scenario_file(dir: &Path, id: &str) -> PathBuf {
    let text = std::fs::read_to_string(dir.join("data/test.jsonl")).unwrap();
    let line = text.lines().find(|l| l.contains(&format!("\"id\":\"{id}\""))).unwrap();
    let p = dir.join(format!("{id}.json"));
    std::fs::write(&p, line).unwrap();
    p
}

fn labels(v: &serde_json::Value) -> Vec<String> {
    let mut out: Vec<String> = v["outcome"]["prediction"]["single"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l.as_str().unwrap().to_string())
        .collect();
    out.sort();
    out
}

#[test]
fn plan_prints_action_or_clarification() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "conformal_single");
    let mut cfg = std::fs::read_to_string(dir.path().join("run.toml")).unwrap();
    cfg = cfg.replace("[0.6, 0.7, 0.8, 0.9]", "[0.9]");
    std::fs::write(dir.path().join("run.toml"), cfg).unwrap();
    pipeline(dir.path());
    let log = run_log(dir.path());

    let certain = log.iter().find(|r| r["outcome"]["certain"] == true).expect("a certain outcome");
    let id = certain["scenario_id"].as_str().unwrap();
    let f = scenario_file(dir.path(), id);
    let o = run(dir.path(), &["--config", "run.toml", "plan", "--non-interactive", "--scenario", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let label = &labels(certain)[0];
    assert!(stdout(&o).contains(&format!("executing {label})")));

    let ambiguous = log
        .iter()
        .find(|r| labels(r).len() > 1)
        .expect("an outcome with several labels");
    let id = ambiguous["scenario_id"].as_str().unwrap();
    let f = scenario_file(dir.path(), id);
    let o = run(dir.path(), &["--config", "run.toml", "plan", "--non-interactive", "--scenario", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    let question = &text[text.find("Which of these did you mean?").unwrap()..];
    let listed: Vec<String> = question
        .lines()
        .skip(1)
        .filter_map(|l| l.trim().split_once(')').map(|(a, _)| a.to_string()))
        .collect();
    assert_eq!(listed, labels(ambiguous));

    // interactive: answering with an offered label executes it
    let mut child = bin()
        .current_dir(dir.path())
        .args(["--config", "run.toml", "plan", "--scenario", f.to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    writeln!(child.stdin.take().unwrap(), "{}", listed[0]).unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains(&format!("executing {})", listed[0])));
}

#[test]
fn verify_coverage_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["verify-coverage", "--n", "1", "--trials", "100", "--tests-per-trial", "50", "--out", "cov.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("cov.json")).unwrap()).unwrap();
    assert_eq!(report["coverage"]["mean_coverage"], serde_json::json!(1.0));
}
