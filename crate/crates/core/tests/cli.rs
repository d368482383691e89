//! End-to-end runs of the `gmr` binary on a tiny synthetic dataset.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmr_core::config::ExperimentConfig;
use gmr_core::metrics::read_metrics;

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        common::write_dataset(&data, 60, 5);
        let config = root.join("run.conf");
        std::fs::write(&config, common::small_config(&data)).unwrap();
        Workspace { _tmp: tmp, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, out: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gmr"));
        cmd.env_clear().env("RUST_LOG", "warn");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.args(["--config", self.config.to_str().unwrap(), "--out", out.to_str().unwrap()]).args(args);
        cmd.output().unwrap()
    }

    fn ok(&self, out: &Path, args: &[&str], env: &[(&str, &str)]) -> String {
        let o = self.run(out, args, env);
        assert!(o.status.success(), "gmr {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn written_config(out: &Path, slt: &str) -> ExperimentConfig {
    let entry = std::fs::read_dir(out)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with(&format!("config-{slt}-")))
        .expect("config dump");
    ExperimentConfig::from_file(entry.path()).unwrap()
}

#[test]
fn train_writes_all_artifacts() {
    let ws = Workspace::new();
    let out = ws.out("train");
    let stdout = ws.ok(&out, &["--seed", "4", "--reps", "2", "train"], &[]);
    assert!(stdout.contains("D10-gmr-r0 seed 4"), "{stdout}");
    assert!(stdout.contains("D10-gmr-r1 seed 5"), "{stdout}");
    for f in ["metrics.csv", "timings.csv", "trace.csv", "boundaries.csv", "checkpoints/D10-gmr-r0.gmrc", "checkpoints/D10-gmr-r1.gmrc"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let rows = read_metrics(out.join("metrics.csv")).unwrap();
    // one sub-task, epochs_first = 6, two runs
    assert_eq!(rows.len(), 12);
    let accs: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
    assert!(accs.iter().all(|a| (0.0..=100.0).contains(a)), "{accs:?}");
    assert!(accs.iter().cloned().fold(0.0, f64::max) > 40.0, "{accs:?}");
    let cfg = written_config(&out, "D10");
    assert_eq!((cfg.seed, cfg.repetitions, cfg.components), (4, 2, 16));
    let hash = cfg.hash();
    assert!(out.join(format!("config-D10-{hash}.txt")).is_file());
    let timings = std::fs::read_to_string(out.join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 13);
    assert!(timings.lines().skip(1).all(|l| l.ends_with(&hash)));
}

#[test]
fn set_beats_environment_beats_file() {
    let ws = Workspace::new();
    let env_only = ws.out("env");
    ws.ok(&env_only, &["--reps", "1", "train"], &[("GMR_COMPONENTS", "9")]);
    assert_eq!(written_config(&env_only, "D10").components, 9);

    let both = ws.out("both");
    ws.ok(&both, &["--reps", "1", "--set", "components=12", "train"], &[("GMR_COMPONENTS", "9")]);
    assert_eq!(written_config(&both, "D10").components, 12);

    let bad = ws.run(&ws.out("bad"), &["train"], &[("GMR_NO_SUCH_KEY", "1")]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("GMR_NO_SUCH_KEY"));
}

#[test]
fn rerun_into_same_directory_is_refused() {
    let ws = Workspace::new();
    let out = ws.out("dup");
    ws.ok(&out, &["--reps", "1", "train"], &[]);
    let before = std::fs::read(out.join("metrics.csv")).unwrap();
    let again = ws.run(&out, &["--reps", "1", "train"], &[]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("D10-gmr-r0"));
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), before);
}

#[test]
fn summarize_reports_difference_to_baseline() {
    let ws = Workspace::new();
    let out = ws.out("sum");
    ws.ok(&out, &["--reps", "2", "train"], &[]);
    ws.ok(&out, &["--reps", "2", "--set", "slt=D5-5a", "train"], &[]);
    let stdout = ws.ok(&out, &["summarize"], &[]);
    assert!(out.join("summary.csv").is_file() && out.join("grid.csv").is_file());

    // recompute from the raw log
    let rows = read_metrics(out.join("metrics.csv")).unwrap();
    let best = |slt: &str| {
        let mut per_run = std::collections::BTreeMap::<String, f64>::new();
        for r in rows.iter().filter(|r| r.slt == slt) {
            let e = per_run.entry(r.run_id.clone()).or_insert(f64::MIN);
            *e = e.max(r.test_accuracy);
        }
        assert_eq!(per_run.len(), 2);
        per_run.values().sum::<f64>() / 2.0
    };
    let (base, split) = (best("D10"), best("D5-5a"));
    let line = stdout.lines().find(|l| l.starts_with("gmr,D5-5a,")).expect(&stdout);
    let fields: Vec<&str> = line.split(',').collect();
    assert_eq!(fields[3], "2");
    let mean: f64 = fields[4].parse().unwrap();
    let diff: f64 = fields[6].parse().unwrap();
    assert!((mean - split).abs() < 1e-3, "{mean} vs {split}");
    assert!((diff - (split - base)).abs() < 1e-3, "{diff} vs {}", split - base);
}

#[test]
fn summarize_without_baseline_fails() {
    let ws = Workspace::new();
    let out = ws.out("nobase");
    ws.ok(&out, &["--reps", "1", "--set", "slt=D5-5a", "train"], &[]);
    assert!(!ws.run(&out, &["summarize"], &[]).status.success());
}

#[test]
fn sample_writes_pgm_grid() {
    let ws = Workspace::new();
    let out = ws.out("s");
    ws.ok(&out, &["--reps", "1", "train"], &[]);
    let ckpt = out.join("checkpoints/D10-gmr-r0.gmrc");
    let pgm = out.join("grid.pgm");
    let stdout = ws.ok(
        &out,
        &["sample", "--checkpoint", ckpt.to_str().unwrap(), "--classes", "1,2", "--rows", "2", "--cols", "3", "--output", pgm.to_str().unwrap()],
        &[],
    );
    assert!(stdout.contains("in requested set"), "{stdout}");
    let bytes = std::fs::read(&pgm).unwrap();
    let hash = ExperimentConfig::from_file(&ws.config).unwrap().hash();
    let text = String::from_utf8_lossy(&bytes);
    let mut lines = text.splitn(5, '\n');
    assert_eq!(lines.next(), Some("P5"));
    let comment = lines.next().unwrap();
    assert!(comment.starts_with(&format!("# config {hash} classes [")), "{comment}");
    let requested: Vec<&str> = comment.split('[').nth(1).unwrap().trim_end_matches(']').split(", ").collect();
    assert_eq!(requested.len(), 6);
    assert!(requested.iter().all(|c| *c == "1" || *c == "2"), "{comment}");
    assert_eq!(lines.next(), Some("12 8"));
    assert_eq!(lines.next(), Some("255"));
    let header_len = 3 + comment.len() + 1 + 5 + 4;
    assert_eq!(bytes.len(), header_len + 12 * 8);
}

#[test]
fn boundaries_subcommand_prints_transitions() {
    let ws = Workspace::new();
    let out = ws.out("b");
    let stdout = ws.ok(&out, &["--reps", "1", "--set", "slt=D5-5a", "boundaries"], &[]);
    assert!(stdout.contains("D5-5a-boundaries-r0: transitions ["), "{stdout}");
    assert!(stdout.contains("matched"), "{stdout}");
    let trace = std::fs::read_to_string(out.join("D5-5a-boundaries-r0.trace.csv")).unwrap();
    assert!(trace.starts_with("batch,sub_task,epoch,inlier_fraction,boundary\n"));
    assert!(trace.lines().skip(1).any(|l| l.split(',').nth(1) == Some("1")));
}
