use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tacservo::experiment::ExperimentConfig;

fn tacservo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacservo"))
        .args(args)
        .env("TACSERVO_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Tiny, fast config: few samples, one short training run.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    let mut cfg = ExperimentConfig {
        seed: 11,
        ..Default::default()
    };
    cfg.collection.edge.n_samples = 24;
    cfg.collection.surface.n_samples = 24;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.servo.max_steps = 40;
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn field<'a>(csv: &'a str, row: usize, name: &str) -> &'a str {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines.nth(row).unwrap().split(',').nth(col).unwrap()
}

#[test]
fn shipped_config_matches_the_built_in_defaults() {
    let cfg = ExperimentConfig::load(&workspace_file("configs/default.toml")).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn collect_prints_a_stable_hash() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path| tacservo(&["collect", "--samples", "10", "--seed", "3", "--out", p(out)]);
    let (ra, rb) = (run(&a), run(&b));
    assert!(ra.status.success(), "{}", stderr(&ra));
    assert!(rb.status.success(), "{}", stderr(&rb));
    let hash = stdout(&ra).lines().last().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(stdout(&rb).lines().last().unwrap(), hash);
    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 11);
}

#[test]
fn out_of_range_angle_is_a_validation_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "seed = 1\n[collection]\nallow_range_override = true\n[collection.edge]\noffset = [-5.0, 5.0]\ndepth = [-1.0, 1.0]\nangle = [-200.0, 45.0]\nslide_x = [-5.0, 5.0]\nslide_y = [-5.0, 5.0]\nslide_angle = [-5.0, 5.0]\nn_samples = 10\n",
    )
    .unwrap();
    let o = tacservo(&["collect", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("collection.edge.angle") && err.contains("line 7"), "{err}");
}

#[test]
fn argument_errors_exit_with_the_validation_code() {
    assert_eq!(tacservo(&["collect", "--bogus"]).status.code(), Some(1));
    assert_eq!(tacservo(&["servo", "--shape", "circle"]).status.code(), Some(1));
    assert_eq!(tacservo(&["collect", "--family", "optical"]).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_tacservo"))
        .args(["render", "--out", "/dev/null"])
        .env("TACSERVO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = tacservo(&["collect", "--seed", "18446744073709551615", "--out", "/dev/null/x"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(tacservo(&["--help"]).status.success());
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = tacservo(&["train", "--dataset", p(&dir.path().join("nope")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn one_epoch_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let o = tacservo(&["collect", "--config", p(&cfg), "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut sums = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let o = tacservo(&["train", "--config", p(&cfg), "--dataset", p(&data), "--epochs", "1", "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("MAE / range"), "{}", stdout(&o));
        let history = fs::read_to_string(out.join("loss_history.csv")).unwrap();
        assert_eq!(history.lines().count(), 2, "{history}");
        assert!(fs::read_to_string(out.join("pose_report.csv")).unwrap().starts_with("sensor,task,"));
        sums.push(fs::read(out.join("model.bin")).unwrap());
    }
    assert_eq!(sums[0], sums[1]);

    let o = tacservo(&["eval", "--dataset", p(&data), "--checkpoint", p(&dir.path().join("r1/model.bin"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("marker"), "{}", stdout(&o));
}

#[test]
fn oracle_servo_closes_the_circle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("servo");
    let o = tacservo(&["servo", "--oracle", "--shape", "circle", "--task", "edge", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("trace_report.csv")).unwrap();
    assert_eq!(field(&report, 0, "status"), "completed");
    let mae: f64 = field(&report, 0, "position_mae_mm").parse().unwrap();
    assert!(mae < 0.1, "{mae}");
    assert!(fs::read_to_string(out.join("trace.svg")).unwrap().starts_with("<svg"));

    // Re-scoring the saved trajectory gives the same row.
    let o = tacservo(&[
        "eval",
        "--trajectory",
        p(&out.join("trajectory.csv")),
        "--shape",
        "circle",
        "--task",
        "edge",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("completed"), "{}", stdout(&o));
}

#[test]
fn open_loop_servo_loses_contact_with_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("open.toml");
    fs::write(&cfg, "[servo]\ngain = [0.0, 0.0]\n").unwrap();
    let out = dir.path().join("servo");
    let o = tacservo(&["servo", "--config", p(&cfg), "--oracle", "--shape", "square", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
    // Partial artifacts are still written.
    let report = fs::read_to_string(out.join("trace_report.csv")).unwrap();
    assert_eq!(field(&report, 0, "termination"), "lost_contact");
    assert!(out.join("trajectory.csv").exists());
}

#[test]
fn angle_advance_reaches_the_servo_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = tacservo(&[
        "servo", "--oracle", "--shape", "square", "--task", "surface", "--angle-advance", "5", "--out", p(&out),
    ]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(3), "{}", stderr(&o));
    let o = tacservo(&["servo", "--oracle", "--angle-advance", "nan", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn render_writes_a_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("img.pgm");
    let o = tacservo(&["render", "--offset", "-2", "--angle", "30", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let o = tacservo(&["render", "--slide-x", "50", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn single_cell_reproduce_resumes_from_stamps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("results");
    let args = ["reproduce", "--config", p(&cfg), "--only", "marker,edge,circle", "--out", p(&out)];
    let first = tacservo(&args);
    assert!(matches!(first.status.code(), Some(0) | Some(3)), "{}", stderr(&first));
    let trace = fs::read_to_string(out.join("trace_results.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2, "{trace}");
    assert_eq!(field(&trace, 0, "shape"), "circle");
    let pose = fs::read_to_string(out.join("pose_results.csv")).unwrap();
    assert_eq!(pose.lines().count(), 2, "{pose}");
    let model = fs::read(out.join("marker-edge/model.bin")).unwrap();
    let traj = fs::read(out.join("marker-edge/circle/trajectory.csv")).unwrap();

    let second = tacservo(&args);
    assert_eq!(second.status.code(), first.status.code());
    assert_eq!(fs::read_to_string(out.join("trace_results.csv")).unwrap(), trace);
    assert_eq!(fs::read(out.join("marker-edge/model.bin")).unwrap(), model);
    assert_eq!(fs::read(out.join("marker-edge/circle/trajectory.csv")).unwrap(), traj);
    let log = fs::read_to_string(out.join("reproduce.log")).unwrap();
    assert!(log.contains("marker,edge: resumed"), "{log}");
    assert!(log.contains("marker,edge,circle: resumed"), "{log}");
}

#[test]
fn reproduce_rejects_a_bad_cell_spec() {
    let o = tacservo(&["reproduce", "--only", "marker,sideways"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
