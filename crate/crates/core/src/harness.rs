//! Experiment runner: data loading, repetitions and grid points, metric and
//! trace files, summaries and sample grids.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, ArrayView1};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::classifier::ControlNormalization;
use crate::config::{ExperimentConfig, ModelKind, Precision};
use crate::dataio::{build_continual_dataset, build_slt, select_classes, Dataset, RawSplit, SltSpec};
use crate::error::{GmrError, Result};
use crate::ewc::run_ewc;
use crate::gmm::SampleNoise;
use crate::math::{derive_seed, mean_std};
use crate::metrics::{read_metrics, MetricsLog, MetricsRow};
use crate::replay::{generate_conditional, run_gmr, GmrModel, RunLabel, RunOutput};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const BOUNDARIES_FILE: &str = "boundaries.csv";

/// Train/test splits ready for SLT construction.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

impl LoadedData {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn classes(&self) -> usize {
        self.train.class_count
    }
}

/// Reads `train-*` and `t10k-*` IDX pairs from the configured directory and
/// applies the configured re-split, class selection and truncation.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let train_raw = RawSplit::load(&cfg.dataset_dir, "train")?;
    let test_raw = RawSplit::load(&cfg.dataset_dir, "t10k")?;
    let (mut train, mut test) = build_continual_dataset(&train_raw, &test_raw, cfg.split_seed)?;
    if let Some(count) = cfg.class_count {
        let (tr, te, chosen) = select_classes(&train, &test, count, cfg.class_seed)?;
        info!("selected classes {chosen:?}");
        train = tr;
        test = te;
    }
    if let Some(n) = cfg.max_train_samples {
        train = train.truncated(n);
    }
    Ok(LoadedData { train, test })
}

/// Per-run outcome: the maximum joint-test accuracy seen during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub model: String,
    pub slt: String,
    pub grid_lr: f64,
    pub seed: u64,
    pub max_accuracy: f64,
}

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Gmr => "gmr",
        ModelKind::Ewc => "ewc",
    }
}

fn run_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    cfg.seed.wrapping_add(rep as u64)
}

fn run_id(cfg: &ExperimentConfig, grid_lr: Option<f64>, rep: usize) -> String {
    match grid_lr {
        Some(lr) => format!("{}-{}-lr{lr:e}-r{rep}", cfg.slt, model_name(cfg.model)),
        None => format!("{}-{}-r{rep}", cfg.slt, model_name(cfg.model)),
    }
}

fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn existing_run_ids(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_metrics(path)?.into_iter().map(|r| r.run_id).collect())
}

fn max_accuracy(rows: &[MetricsRow]) -> f64 {
    rows.iter().map(|r| r.test_accuracy).filter(|a| !a.is_nan()).fold(f64::NAN, f64::max)
}

/// Executes every repetition (and, for EWC, every grid point) of `cfg`,
/// appending to the metric files in `out`. Metric rows are written as soon as
/// each epoch finishes, so a failed run leaves its partial log behind.
pub fn run_config(cfg: &ExperimentConfig, data: &LoadedData, out: &Path) -> Result<Vec<RunResult>> {
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    std::fs::write(out.join(format!("config-{}-{hash}.txt", cfg.slt)), cfg.to_text())?;
    let metrics_path = out.join(METRICS_FILE);
    let done = existing_run_ids(&metrics_path)?;
    let spec = SltSpec::named(&cfg.slt)?;
    let grid: Vec<Option<f64>> = match cfg.model {
        ModelKind::Gmr => vec![None],
        ModelKind::Ewc => cfg.ewc_grid.iter().map(|&g| Some(g)).collect(),
    };
    let mut results = Vec::new();
    for &grid_lr in &grid {
        for rep in 0..cfg.repetitions {
            let id = run_id(cfg, grid_lr, rep);
            if done.contains(&id) {
                return Err(GmrError::InvalidArgument(format!(
                    "{} already holds rows for {id}; use a fresh output directory",
                    metrics_path.display()
                )));
            }
            let label = RunLabel { run_id: id.clone(), slt: spec.name.clone(), seed: run_seed(cfg, rep) };
            let tasks = build_slt(&data.train, &data.test, &spec)?;
            let mut log = MetricsLog::open(&metrics_path)?;
            let mut sink = |row: &MetricsRow| log.append(row);
            info!("{id}: start (config {hash})");
            let (rows, seconds) = match (cfg.model, grid_lr) {
                (ModelKind::Gmr, _) => {
                    let settings = cfg.gmr_settings();
                    let (model, output) =
                        run_gmr(tasks, &data.test, data.dim(), data.classes(), &settings, &label, &mut sink)?;
                    write_trace(out, &id, &output)?;
                    if cfg.checkpoints {
                        let dir = out.join("checkpoints");
                        std::fs::create_dir_all(&dir)?;
                        checkpoint::save(&model, dir.join(format!("{id}.gmrc")))?;
                    }
                    (output.rows, output.epoch_seconds)
                }
                (ModelKind::Ewc, lr) => {
                    let settings = cfg.ewc_settings(lr.expect("grid point"));
                    match cfg.ewc_precision {
                        Precision::F32 => {
                            let run = run_ewc::<f32, _>(tasks, &data.test, data.dim(), data.classes(), &settings, &label, &mut sink)?;
                            (run.rows, run.epoch_seconds)
                        }
                        Precision::F64 => {
                            let run = run_ewc::<f64, _>(tasks, &data.test, data.dim(), data.classes(), &settings, &label, &mut sink)?;
                            (run.rows, run.epoch_seconds)
                        }
                    }
                }
            };
            let timing: Vec<String> = rows
                .iter()
                .zip(&seconds)
                .map(|(r, s)| format!("{},{},{},{s:.3},{hash}", r.run_id, r.sub_task, r.epoch))
                .collect();
            append_lines(&out.join(TIMINGS_FILE), "run_id,sub_task,epoch,seconds,config_hash", &timing)?;
            let result = RunResult {
                run_id: id.clone(),
                model: model_name(cfg.model).into(),
                slt: spec.name.clone(),
                grid_lr: grid_lr.unwrap_or(f64::NAN),
                seed: label.seed,
                max_accuracy: max_accuracy(&rows),
            };
            info!("{id}: max accuracy {:.2}%", result.max_accuracy);
            results.push(result);
        }
    }
    Ok(results)
}

fn write_trace(out: &Path, id: &str, output: &RunOutput) -> Result<()> {
    let trace: Vec<String> = output
        .trace
        .iter()
        .map(|p| format!("{id},{},{},{},{:.6},{}", p.batch, p.sub_task, p.epoch, p.inlier_fraction, u8::from(p.boundary)))
        .collect();
    append_lines(&out.join(TRACE_FILE), "run_id,batch,sub_task,epoch,inlier_fraction,boundary", &trace)?;
    let mut events: Vec<String> = output.transitions.iter().map(|b| format!("{id},transition,{b}")).collect();
    events.extend(output.boundaries.iter().map(|b| format!("{id},detected,{b}")));
    append_lines(&out.join(BOUNDARIES_FILE), "run_id,kind,batch", &events)
}

/// Runs `cfg` once per benchmark SLT, all into `out`.
pub fn run_suite(cfg: &ExperimentConfig, data: &LoadedData, out: &Path) -> Result<Vec<RunResult>> {
    let mut all = Vec::new();
    for spec in SltSpec::all() {
        let mut c = cfg.clone();
        c.slt = spec.name.clone();
        all.extend(run_config(&c, data, out)?);
    }
    Ok(all)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub slt: String,
    pub grid_lr: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    /// `mean` minus the same model's baseline mean.
    pub diff: f64,
}

pub const SUMMARY_HEADER: &str = "model,slt,grid_lr,runs,mean_max_accuracy,std_max_accuracy,diff_to_baseline";

impl SummaryRow {
    pub fn to_csv(&self) -> String {
        let f = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.4}") };
        let lr = if self.grid_lr.is_nan() { String::new() } else { format!("{:e}", self.grid_lr) };
        format!("{},{},{lr},{},{},{},{}", self.model, self.slt, self.runs, f(self.mean), f(self.std), f(self.diff))
    }
}

fn grid_key(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:e}")
    }
}

/// Per (model, SLT, grid point): mean and sample standard deviation of the
/// per-run maximum accuracy. Returned in a stable order.
pub fn grid_statistics(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut per_run: BTreeMap<(String, String, String), BTreeMap<String, f64>> = BTreeMap::new();
    let mut lr_of: BTreeMap<String, f64> = BTreeMap::new();
    for r in rows {
        let key = (r.model.clone(), r.slt.clone(), grid_key(r.grid_lr));
        lr_of.insert(grid_key(r.grid_lr), r.grid_lr);
        let best = per_run.entry(key).or_default().entry(r.run_id.clone()).or_insert(f64::NEG_INFINITY);
        if r.test_accuracy > *best {
            *best = r.test_accuracy;
        }
    }
    per_run
        .into_iter()
        .map(|((model, slt, lr), runs)| {
            let maxima: Vec<f64> = runs.into_values().collect();
            let (mean, std) = mean_std(&maxima);
            SummaryRow { model, slt, grid_lr: lr_of[&lr], runs: maxima.len(), mean, std, diff: f64::NAN }
        })
        .collect()
}

/// Table of results: for each model and SLT the best grid point (highest
/// mean), with its difference to the same model's `D10` baseline.
pub fn summarize(rows: &[MetricsRow]) -> Result<Vec<SummaryRow>> {
    let mut best: BTreeMap<(String, String), SummaryRow> = BTreeMap::new();
    for s in grid_statistics(rows) {
        let key = (s.model.clone(), s.slt.clone());
        match best.get(&key) {
            Some(b) if b.mean >= s.mean => {}
            _ => {
                best.insert(key, s);
            }
        }
    }
    let mut out = Vec::new();
    for ((model, _), row) in &best {
        let base = best.get(&(model.clone(), "D10".to_string())).ok_or(GmrError::MissingBaseline)?;
        let mut r = row.clone();
        r.diff = r.mean - base.mean;
        out.push(r);
    }
    out.sort_by_key(|r| (r.model.clone(), r.slt != "D10", slt_order(&r.slt)));
    Ok(out)
}

fn slt_order(name: &str) -> usize {
    SltSpec::all().iter().position(|s| s.name == name).unwrap_or(usize::MAX)
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{SUMMARY_HEADER}")?;
    for r in summary {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Reads `metrics.csv` in `dir` and writes the summary and grid tables next to it.
pub fn emit_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = read_metrics(dir.join(METRICS_FILE))?;
    write_summary(&dir.join(GRID_FILE), &grid_statistics(&rows))?;
    let summary = summarize(&rows)?;
    write_summary(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Class-conditional samples arranged in a grid: for each cell a class is
/// drawn uniformly from `classes` and sampled through the inverted classifier.
pub struct SampleGrid {
    pub images: Array2<f64>,
    pub requested: Vec<usize>,
    /// The model's own prediction for each generated image.
    pub predicted: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl SampleGrid {
    /// Share of cells whose prediction lies in `classes`.
    pub fn in_set_fraction(&self, classes: &[usize]) -> f64 {
        let hits = self.predicted.iter().filter(|p| classes.contains(p)).count();
        hits as f64 / self.predicted.len().max(1) as f64
    }
}

pub fn sample_grid(
    model: &GmrModel,
    classes: &[usize],
    rows: usize,
    cols: usize,
    confidence: f64,
    control: ControlNormalization,
    noise: SampleNoise,
    seed: u64,
) -> Result<SampleGrid> {
    if classes.is_empty() || rows == 0 || cols == 0 {
        return Err(GmrError::InvalidArgument("empty class set or grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let requested: Vec<usize> = (0..rows * cols).map(|_| *classes.choose(&mut rng).expect("non-empty")).collect();
    let images = generate_conditional(model, &requested, confidence, control, &mut rng, noise)?;
    let predicted = model.predict(images.view());
    Ok(SampleGrid { images, requested, predicted, rows, cols })
}

fn image_shape(dim: usize) -> (usize, usize) {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side, side)
    } else {
        (1, dim)
    }
}

fn to_pixel(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Binary PGM of `images` tiled `rows×cols`, with an optional comment line.
pub fn encode_pgm(images: &[ArrayView1<f64>], rows: usize, cols: usize, comment: Option<&str>) -> Result<Vec<u8>> {
    let dim = images.first().map_or(0, |i| i.len());
    if images.len() != rows * cols || images.iter().any(|i| i.len() != dim) {
        return Err(GmrError::Shape(format!("{} images for a {rows}x{cols} grid", images.len())));
    }
    let (h, w) = image_shape(dim);
    let (height, width) = (rows * h, cols * w);
    let mut out = b"P5\n".to_vec();
    if let Some(c) = comment {
        out.extend(format!("# {c}\n").bytes());
    }
    out.extend(format!("{width} {height}\n255\n").bytes());
    for y in 0..height {
        for x in 0..width {
            let img = &images[(y / h) * cols + x / w];
            out.push(to_pixel(img[(y % h) * w + x % w]));
        }
    }
    Ok(out)
}

pub fn emit_sample_grid(grid: &SampleGrid, path: &Path, config_hash: &str) -> Result<()> {
    let views: Vec<_> = grid.images.rows().into_iter().collect();
    let comment = format!("config {config_hash} classes {:?}", grid.requested);
    std::fs::write(path, encode_pgm(&views, grid.rows, grid.cols, Some(&comment))?)?;
    Ok(())
}

/// Whether every true transition has a detection within `tolerance` batches.
pub fn transitions_matched(transitions: &[usize], detected: &[usize], tolerance: usize) -> Vec<bool> {
    transitions.iter().map(|&t| detected.iter().any(|&d| d.abs_diff(t) <= tolerance)).collect()
}

pub fn checkpoint_path(out: &Path, run_id: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{run_id}.gmrc"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::GmrSettings;
    use ndarray::array;

    fn row(run: &str, model: &str, slt: &str, lr: f64, acc: f64) -> MetricsRow {
        MetricsRow {
            run_id: run.into(),
            slt: slt.into(),
            model: model.into(),
            grid_lr: lr,
            seed: 0,
            sub_task: 1,
            epoch: 1,
            train_loss: 0.0,
            gmm_loglik: f64::NAN,
            test_accuracy: acc,
            inlier_fraction: f64::NAN,
            boundaries: 0,
            replay_requested: 0,
            replay_accepted: 0,
        }
    }

    #[test]
    fn summary_diff_to_baseline() {
        let rows = vec![
            row("a", "gmr", "D10", f64::NAN, 87.0),
            row("a", "gmr", "D10", f64::NAN, 87.4),
            row("b", "gmr", "D9-1a", f64::NAN, 86.1),
        ];
        let s = summarize(&rows).unwrap();
        assert_eq!(s[0].slt, "D10");
        assert_eq!(s[0].diff, 0.0);
        assert_eq!(s[0].std, 0.0);
        assert!((s[1].diff - (86.1 - 87.4)).abs() < 1e-12);
    }

    #[test]
    fn summary_picks_best_grid_point_and_needs_baseline() {
        let rows = vec![
            row("x1", "ewc", "D10", 1e-3, 97.0),
            row("x2", "ewc", "D10", 1e-4, 95.0),
            row("y1", "ewc", "D5-5a", 1e-3, 50.0),
            row("y2", "ewc", "D5-5a", 1e-4, 60.0),
            row("y3", "ewc", "D5-5a", 1e-4, 62.0),
        ];
        let s = summarize(&rows).unwrap();
        let d55 = s.iter().find(|r| r.slt == "D5-5a").unwrap();
        assert_eq!(d55.grid_lr, 1e-4);
        assert_eq!(d55.runs, 2);
        assert!((d55.mean - 61.0).abs() < 1e-12);
        assert!((d55.diff - (61.0 - 97.0)).abs() < 1e-12);
        assert!(matches!(summarize(&rows[2..]), Err(GmrError::MissingBaseline)));
    }

    #[test]
    fn pgm_layout() {
        let a = array![0.0, 1.0, 0.5, 2.0];
        let b = array![-1.0, 0.25, 0.0, 0.0];
        let bytes = encode_pgm(&[a.view(), b.view()], 1, 2, None).unwrap();
        let header = b"P5\n4 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 255, 0, 64, 128, 255, 0, 0]);
        let single = encode_pgm(&[array![0.1, 0.2, 0.3].view()], 1, 1, Some("x")).unwrap();
        assert!(single.starts_with(b"P5\n# x\n3 1\n255\n"));
        assert_eq!(single.len(), "P5\n# x\n3 1\n255\n".len() + 3);
    }

    #[test]
    fn zero_noise_grid_shows_centroids() {
        let settings = GmrSettings { components: 3, ..GmrSettings::default() };
        let model = GmrModel::new(4, 2, &settings, 1);
        let grid = sample_grid(&model, &[0, 1], 2, 2, 0.95, ControlNormalization::Softmax, SampleNoise::Zero, 3).unwrap();
        for img in grid.images.rows() {
            assert!(model.gmm.centroids.rows().into_iter().any(|c| c == img));
        }
    }

    #[test]
    fn transition_matching() {
        assert_eq!(transitions_matched(&[100, 300], &[95, 330], 20), vec![true, false]);
    }
}
