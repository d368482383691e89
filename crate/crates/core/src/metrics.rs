//! Per-epoch metric rows and their CSV encoding.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{GmrError, Result};

pub const METRICS_HEADER: &str = "run_id,slt,model,grid_lr,seed,sub_task,epoch,train_loss,gmm_loglik,test_accuracy,inlier_fraction,boundaries,replay_requested,replay_accepted";

/// One row per (run, sub-task, epoch). Accuracy is in percent on the joint test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub slt: String,
    pub model: String,
    pub grid_lr: f64,
    pub seed: u64,
    pub sub_task: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub gmm_loglik: f64,
    pub test_accuracy: f64,
    pub inlier_fraction: f64,
    pub boundaries: usize,
    pub replay_requested: usize,
    pub replay_accepted: usize,
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Grid learning rates span many decades, so they keep full precision.
fn fmt_lr(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:e}")
    }
}

fn parse_f(s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| csv_err(format!("bad float '{s}'")))
}

fn parse_u<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| csv_err(format!("bad integer '{s}'")))
}

fn csv_err(message: String) -> GmrError {
    GmrError::Config { location: "metrics csv".into(), message }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.slt,
            self.model,
            fmt_lr(self.grid_lr),
            self.seed,
            self.sub_task,
            self.epoch,
            fmt_f(self.train_loss),
            fmt_f(self.gmm_loglik),
            fmt_f(self.test_accuracy),
            fmt_f(self.inlier_fraction),
            self.boundaries,
            self.replay_requested,
            self.replay_accepted
        )
        .expect("write to string");
        s
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 14 {
            return Err(csv_err(format!("expected 14 fields, got {}", f.len())));
        }
        Ok(Self {
            run_id: f[0].to_string(),
            slt: f[1].to_string(),
            model: f[2].to_string(),
            grid_lr: parse_f(f[3])?,
            seed: parse_u(f[4])?,
            sub_task: parse_u(f[5])?,
            epoch: parse_u(f[6])?,
            train_loss: parse_f(f[7])?,
            gmm_loglik: parse_f(f[8])?,
            test_accuracy: parse_f(f[9])?,
            inlier_fraction: parse_f(f[10])?,
            boundaries: parse_u(f[11])?,
            replay_requested: parse_u(f[12])?,
            replay_accepted: parse_u(f[13])?,
        })
    }
}

/// Append-only metrics sink backed by a CSV file.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    /// Opens `path` for appending, writing the header if the file is new or empty.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim_end() != METRICS_HEADER {
                return Err(csv_err("unexpected header".into()));
            }
            continue;
        }
        if !line.trim().is_empty() {
            rows.push(MetricsRow::from_csv(&line)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn row_roundtrip(seed in any::<u64>(), sub in 1usize..6, epoch in 1usize..500,
                         loss in -1e4f64..1e4, acc in 0f64..100.0, frac in 0f64..1.0,
                         b in 0usize..5, req in 0usize..100_000, acc_n in 0usize..100_000) {
            let row = MetricsRow {
                run_id: "D5-5a-r0".into(), slt: "D5-5a".into(), model: "gmr".into(),
                grid_lr: f64::NAN, seed, sub_task: sub, epoch,
                train_loss: (loss * 1e6).round() / 1e6, gmm_loglik: f64::NAN,
                test_accuracy: (acc * 1e6).round() / 1e6, inlier_fraction: (frac * 1e6).round() / 1e6,
                boundaries: b, replay_requested: req, replay_accepted: acc_n,
            };
            let back = MetricsRow::from_csv(&row.to_csv()).unwrap();
            prop_assert_eq!(back.to_csv(), row.to_csv());
        }
    }

    #[test]
    fn small_grid_rates_survive_the_csv() {
        for lr in [1e-3, 1e-5, 1e-7, 2.5e-9] {
            let row = MetricsRow {
                run_id: "r".into(), slt: "D10".into(), model: "ewc".into(), grid_lr: lr, seed: 1,
                sub_task: 1, epoch: 1, train_loss: 0.5, gmm_loglik: f64::NAN, test_accuracy: 90.0,
                inlier_fraction: f64::NAN, boundaries: 0, replay_requested: 0, replay_accepted: 0,
            };
            assert_eq!(MetricsRow::from_csv(&row.to_csv()).unwrap().grid_lr, lr);
        }
    }

    #[test]
    fn log_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow {
            run_id: "r".into(), slt: "D10".into(), model: "ewc".into(), grid_lr: 0.001, seed: 1,
            sub_task: 1, epoch: 1, train_loss: 0.5, gmm_loglik: f64::NAN, test_accuracy: 90.0,
            inlier_fraction: f64::NAN, boundaries: 0, replay_requested: 0, replay_accepted: 0,
        };
        MetricsLog::open(&path).unwrap().append(&row).unwrap();
        MetricsLog::open(&path).unwrap().append(&row).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(std::fs::read_to_string(&path).unwrap().matches("run_id").count(), 1);
    }
}
