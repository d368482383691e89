//! Gaussian Mixture Replay: sequential training over sub-tasks with generated
//! replay, outlier-filtered generation and unsupervised boundary detection.

use std::collections::VecDeque;
use std::time::Instant;

use log::info;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{ClassifierParams, ControlNormalization};
use crate::dataio::{iterate_batches, Dataset, SubTaskData};
use crate::error::{GmrError, Result};
use crate::gmm::{Annealing, ComponentGrid, GmmInit, GmmParams, LossStats, ResponsibilityMode, SampleNoise, StepConfig, UpdateRule};
use crate::math::derive_seed;
use crate::metrics::MetricsRow;

/// Evaluation chunk size for full-dataset passes.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplayStrategy {
    /// Replay as many samples as all previous sub-tasks together contained.
    Proportional,
    /// Replay `kappa` times the current sub-task's size.
    Constant { kappa: f64 },
}

/// Number of samples to generate before training on sub-task `history.len() + 1`.
pub fn replay_quota(strategy: ReplayStrategy, history: &[usize], current_nu: usize) -> usize {
    if history.is_empty() {
        return 0;
    }
    match strategy {
        ReplayStrategy::Proportional => history.iter().sum(),
        ReplayStrategy::Constant { kappa } => (kappa * current_nu as f64).round() as usize,
    }
}

/// How generated samples get their labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PseudoLabels {
    /// Argmax of the current classifier on the sample's responsibilities.
    #[default]
    Predicted,
    /// Sample each class conditionally through the inverted classifier.
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmrSettings {
    pub components: usize,
    pub lr_gmm: f64,
    pub lr_classifier: f64,
    pub batch_size: usize,
    pub sigma_min: f64,
    pub ema_alpha: f64,
    pub ema_warmup: usize,
    pub outlier_c: f64,
    pub strategy: ReplayStrategy,
    pub epochs_first: usize,
    pub epoch_cap: usize,
    pub max_attempts_factor: f64,
    pub responsibility_mode: ResponsibilityMode,
    pub pseudo_labels: PseudoLabels,
    pub confidence: f64,
    pub control: ControlNormalization,
    pub init: GmmInit,
    pub init_from_data: bool,
    /// Standard deviation of Gaussian noise added to real samples before
    /// they reach the GMM and classifier. Generated samples are left as drawn.
    pub input_noise: f64,
    pub update_rule: UpdateRule,
    /// Neighbourhood smoothing at the start of training; `None` trains on the exact gradient throughout.
    pub annealing: Option<Annealing>,
    pub detector: DetectorSettings,
}

impl Default for GmrSettings {
    fn default() -> Self {
        Self {
            components: 100,
            lr_gmm: 0.01,
            lr_classifier: 0.01,
            batch_size: 100,
            sigma_min: 0.01,
            ema_alpha: 0.001,
            ema_warmup: 500,
            outlier_c: 1.0,
            strategy: ReplayStrategy::Proportional,
            epochs_first: 50,
            epoch_cap: 400,
            max_attempts_factor: 10.0,
            responsibility_mode: ResponsibilityMode::Unweighted,
            pseudo_labels: PseudoLabels::Predicted,
            confidence: 0.95,
            control: ControlNormalization::Softmax,
            init: GmmInit::default(),
            init_from_data: false,
            input_noise: 0.3,
            update_rule: UpdateRule::Natural,
            annealing: Some(Annealing { start: 10.0, end: 0.1, steps: 3000 }),
            detector: DetectorSettings::default(),
        }
    }
}

impl GmrSettings {
    /// `E(t) = min(epochs_first * 2^(t-1), epoch_cap)` for 1-based `t`.
    pub fn epochs_for(&self, sub_task: usize) -> usize {
        let shift = sub_task.saturating_sub(1).min(32) as u32;
        self.epochs_first.saturating_mul(1usize << shift).min(self.epoch_cap)
    }
}

/// The coupled generator/learner.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrModel {
    pub gmm: GmmParams,
    pub classifier: ClassifierParams,
    pub stats: LossStats,
    pub mode: ResponsibilityMode,
    pub grid: ComponentGrid,
    /// GMM steps taken so far.
    pub steps: usize,
}

/// Per-batch training outcome.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub ce_loss: f64,
    pub mean_loglik: f64,
    /// Inlier share among the batch's real (non-generated) samples, if any.
    pub inlier_fraction: Option<f64>,
}

impl GmrModel {
    pub fn new(dim: usize, classes: usize, settings: &GmrSettings, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        Self {
            gmm: GmmParams::init(settings.components, dim, &settings.init, &mut rng),
            classifier: ClassifierParams::zeros(classes, settings.components),
            stats: LossStats::new(settings.ema_alpha, settings.ema_warmup),
            mode: settings.responsibility_mode,
            grid: ComponentGrid::new(settings.components),
            steps: 0,
        }
    }

    pub fn responsibilities(&self, images: ArrayView2<f64>) -> Array2<f64> {
        self.gmm.batch_responsibilities(images, self.mode)
    }

    pub fn predict(&self, images: ArrayView2<f64>) -> Vec<usize> {
        let mut out = Vec::with_capacity(images.nrows());
        for chunk in images.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            out.extend(self.classifier.batch_predict(self.responsibilities(chunk).view()));
        }
        out
    }

    /// Classification accuracy in percent.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return f64::NAN;
        }
        let hits = self.predict(data.images.view()).iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        100.0 * hits as f64 / data.len() as f64
    }

    /// Per-sample log-likelihoods, evaluated in chunks.
    pub fn log_likelihoods(&self, images: ArrayView2<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(images.nrows());
        for chunk in images.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            out.extend(self.gmm.log_likelihood(chunk).per_sample);
        }
        out
    }

    /// Trains classifier and GMM on one batch, each with its own loss, from
    /// the same pre-step state. Loss statistics track the real samples only.
    pub fn train_batch(
        &mut self,
        images: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        is_real: &[bool],
        settings: &GmrSettings,
        batch_index: usize,
    ) -> Result<BatchReport> {
        let log_densities = self.gmm.batch_log_densities(images);
        let gammas = self.gmm.responsibilities_from(log_densities.clone(), self.mode);
        let ce_loss = self.classifier.train_step(gammas.view(), targets, settings.lr_classifier, batch_index)?;
        let radius = settings.annealing.and_then(|a| a.radius(self.steps));
        let smoothing = radius.map(|r| (&self.grid, r));
        let config = StepConfig { lr: settings.lr_gmm, sigma_min: settings.sigma_min, rule: settings.update_rule };
        let step = self.gmm.step_from(images, log_densities, &config, smoothing, batch_index)?;
        self.steps += 1;
        let real: Vec<f64> = step
            .likelihood
            .per_sample
            .iter()
            .zip(is_real)
            .filter(|(_, &r)| r)
            .map(|(&l, _)| l)
            .collect();
        let inlier_fraction = if real.is_empty() || !self.stats.is_warm() {
            None
        } else {
            Some(self.stats.inlier_fraction(real.iter().copied(), settings.outlier_c))
        };
        self.stats.update(real);
        Ok(BatchReport { ce_loss, mean_loglik: step.likelihood.mean(), inlier_fraction })
    }
}

/// Generated replay samples with their pseudo-labels.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    pub requested: usize,
    pub drawn: usize,
    /// True when the attempt budget ran out before `requested` were accepted.
    pub short: bool,
}

impl Generated {
    pub fn acceptance_rate(&self) -> f64 {
        if self.drawn == 0 {
            return 1.0;
        }
        self.data.len() as f64 / self.drawn as f64
    }
}

/// Samples from the GMM, discarding draws whose log-likelihood marks them as
/// outliers, until `count` are accepted or `max_attempts_factor * count`
/// draws are spent. Labels come from the classifier.
pub fn generate_filtered(
    model: &GmrModel,
    count: usize,
    c: f64,
    max_attempts_factor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Generated> {
    let classes = model.classifier.classes();
    let dim = model.gmm.dim();
    if count == 0 {
        return Ok(Generated { data: Dataset::new(Array2::zeros((0, dim)), vec![], classes)?, requested: 0, drawn: 0, short: false });
    }
    let budget = ((count as f64) * max_attempts_factor.max(1.0)).ceil() as usize;
    let mut accepted: Vec<Array2<f64>> = Vec::new();
    let (mut n_acc, mut drawn) = (0usize, 0usize);
    while n_acc < count && drawn < budget {
        let want = (count - n_acc).clamp(64, 10_000).min(budget - drawn);
        let (xs, _) = model.gmm.sample(want, None, SampleNoise::Gaussian, rng)?;
        drawn += want;
        let lls = model.log_likelihoods(xs.view());
        let keep: Vec<usize> = (0..want).filter(|&i| !model.stats.is_outlier(lls[i], c)).take(count - n_acc).collect();
        n_acc += keep.len();
        accepted.push(xs.select(Axis(0), &keep));
    }
    if n_acc == 0 {
        return Err(GmrError::DegenerateGenerator { attempts: drawn });
    }
    let views: Vec<_> = accepted.iter().map(|a| a.view()).collect();
    let images = ndarray::concatenate(Axis(0), &views).map_err(|e| GmrError::Shape(e.to_string()))?;
    let labels = model.predict(images.view());
    Ok(Generated { data: Dataset::new(images, labels, classes)?, requested: count, drawn, short: n_acc < count })
}

/// Class-conditional generation: for each requested class the inverted
/// classifier provides the component weights. Returns images and the class
/// each was generated for.
pub fn generate_conditional(
    model: &GmrModel,
    classes: &[usize],
    confidence: f64,
    control: ControlNormalization,
    rng: &mut ChaCha8Rng,
    noise: SampleNoise,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((classes.len(), model.gmm.dim()));
    let mut cache: Vec<Option<ndarray::Array1<f64>>> = vec![None; model.classifier.classes()];
    for (row, &c) in out.rows_mut().into_iter().zip(classes) {
        if cache.get(c).is_none() {
            return Err(GmrError::InvalidArgument(format!("class {c} out of range")));
        }
        if cache[c].is_none() {
            let signal = model.classifier.invert_for_class(c, confidence, control)?;
            if signal.degenerate {
                log::warn!("control signal for class {c} is degenerate; sampling uniformly");
            }
            cache[c] = Some(signal.weights);
        }
        let w = cache[c].as_ref().expect("filled above");
        let (x, _) = model.gmm.sample(1, Some(w.view()), noise, rng)?;
        let mut row = row;
        row.assign(&x.row(0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSettings {
    /// Batches per window.
    pub window: usize,
    /// Batches between evaluations; `window` gives disjoint windows.
    pub stride: usize,
    /// Relative drop that flags a boundary.
    pub drop_threshold: f64,
    /// Batches ignored at start and after each detection.
    pub warmup: usize,
    /// Windows before the current one that form the reference.
    pub reference_windows: usize,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self { window: 10, stride: 5, drop_threshold: 0.20, warmup: 50, reference_windows: 5 }
    }
}

/// Streaming sub-task boundary detector over per-batch inlier fractions.
///
/// Every `stride` batches the mean of the last `window` fractions is compared
/// with the means of the `reference_windows` disjoint windows before it; a
/// mean below `(1 - drop_threshold)` times their maximum flags a boundary at
/// the current window's first batch. Detection clears the history and
/// suspends the detector for `warmup` batches.
#[derive(Debug, Clone)]
pub struct BoundaryDetector {
    settings: DetectorSettings,
    resume_at: usize,
    since_eval: usize,
    history: VecDeque<(usize, f64)>,
    boundaries: Vec<usize>,
}

impl BoundaryDetector {
    pub fn new(settings: DetectorSettings) -> Self {
        Self {
            settings,
            resume_at: settings.warmup,
            since_eval: 0,
            history: VecDeque::new(),
            boundaries: Vec::new(),
        }
    }

    /// Feeds the inlier fraction of batch `batch_index` (indices must increase).
    pub fn push(&mut self, batch_index: usize, fraction: f64) -> Option<usize> {
        if batch_index < self.resume_at {
            return None;
        }
        let w = self.settings.window.max(1);
        let keep = w * (self.settings.reference_windows.max(1) + 1);
        self.history.push_back((batch_index, fraction));
        if self.history.len() > keep {
            self.history.pop_front();
        }
        self.since_eval += 1;
        if self.history.len() < 2 * w || self.since_eval < self.settings.stride.max(1) {
            return None;
        }
        self.since_eval = 0;
        let n = self.history.len();
        let mean = |from: usize| self.history.range(from..from + w).map(|(_, f)| f).sum::<f64>() / w as f64;
        let current = mean(n - w);
        let reference = (1..=(n - w) / w).map(|k| mean(n - w - k * w)).fold(f64::NEG_INFINITY, f64::max);
        if current < (1.0 - self.settings.drop_threshold) * reference {
            let start = self.history[n - w].0;
            self.boundaries.push(start);
            self.history.clear();
            self.since_eval = 0;
            self.resume_at = batch_index + 1 + self.settings.warmup;
            return Some(start);
        }
        None
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }
}

/// Offline detection over a complete stream; indices are stream positions.
pub fn detect_boundaries(fractions: &[f64], settings: DetectorSettings) -> Vec<usize> {
    let mut det = BoundaryDetector::new(settings);
    for (i, &f) in fractions.iter().enumerate() {
        det.push(i, f);
    }
    det.boundaries
}

/// One point of the inlier-fraction trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub batch: usize,
    pub sub_task: usize,
    pub epoch: usize,
    pub inlier_fraction: f64,
    pub boundary: bool,
}

/// Everything a GMR run produces besides the final model.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub trace: Vec<TracePoint>,
    /// Global batch index at which each sub-task (after the first) began.
    pub transitions: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub epoch_seconds: Vec<f64>,
}

/// Identification stamped on metric rows.
#[derive(Debug, Clone)]
pub struct RunLabel {
    pub run_id: String,
    pub slt: String,
    pub seed: u64,
}

/// Trains GMR over `sub_tasks` in order, passing each epoch's row to `sink`. Only the current sub-task's data is
/// held at any time; previous sub-tasks are dropped once consumed.
pub fn run_gmr<I>(
    sub_tasks: I,
    joint_test: &Dataset,
    dim: usize,
    classes: usize,
    settings: &GmrSettings,
    label: &RunLabel,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<(GmrModel, RunOutput)>
where
    I: IntoIterator<Item = SubTaskData>,
{
    let seed = label.seed;
    let mut model = GmrModel::new(dim, classes, settings, seed);
    let mut gen_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut detector = BoundaryDetector::new(settings.detector);
    let mut out = RunOutput::default();
    let mut history: Vec<usize> = Vec::new();
    let mut batch_index = 0usize;

    for (t0, task) in sub_tasks.into_iter().enumerate() {
        let t = t0 + 1;
        if t == 1 && settings.init_from_data {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
            let rows: Vec<usize> = (0..task.train.len()).collect::<Vec<_>>().choose_multiple(&mut rng, settings.components).copied().collect();
            let picked = task.train.images.select(Axis(0), &rows);
            model.gmm.centroids.slice_mut(ndarray::s![..picked.nrows(), ..]).assign(&picked);
        }
        let xi = replay_quota(settings.strategy, &history, task.nu);
        let (train, n_real, accepted) = if xi > 0 {
            let generated = match settings.pseudo_labels {
                PseudoLabels::Predicted => generate_filtered(&model, xi, settings.outlier_c, settings.max_attempts_factor, &mut gen_rng)?,
                PseudoLabels::Conditional => generate_conditional_replay(&model, xi, &history_classes(&model), settings, &mut gen_rng)?,
            };
            info!(
                "{}: sub-task {t}: replay {}/{} accepted ({} drawn)",
                label.run_id,
                generated.data.len(),
                xi,
                generated.drawn
            );
            let accepted = generated.data.len();
            (task.train.concat(&generated.data)?, task.nu, accepted)
        } else {
            (task.train, task.nu, 0)
        };
        drop(task.test);
        if t > 1 {
            out.transitions.push(batch_index);
        }
        let is_real_all: Vec<bool> = (0..train.len()).map(|i| i < n_real).collect();
        for epoch in 1..=settings.epochs_for(t) {
            let started = Instant::now();
            let (mut ce_sum, mut ll_sum, mut n_batches) = (0.0, 0.0, 0usize);
            let (mut inl_sum, mut inl_n, mut flagged) = (0.0, 0usize, 0usize);
            let shuffle = derive_seed(seed, 1000 + (t as u64) * 100_000 + epoch as u64);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4000 + (t as u64) * 100_000 + epoch as u64));
            for mut batch in iterate_batches(&train, settings.batch_size, shuffle)? {
                let is_real: Vec<bool> = batch.indices.iter().map(|&i| is_real_all[i]).collect();
                perturb_rows(&mut batch.images, &is_real, settings.input_noise, &mut noise_rng);
                let report = model.train_batch(batch.images.view(), batch.targets.view(), &is_real, settings, batch_index)?;
                ce_sum += report.ce_loss;
                ll_sum += report.mean_loglik;
                n_batches += 1;
                if let Some(f) = report.inlier_fraction {
                    inl_sum += f;
                    inl_n += 1;
                    let hit = detector.push(batch_index, f);
                    if let Some(b) = hit {
                        flagged += 1;
                        info!("{}: boundary flagged at batch {b}", label.run_id);
                    }
                    out.trace.push(TracePoint { batch: batch_index, sub_task: t, epoch, inlier_fraction: f, boundary: hit.is_some() });
                }
                batch_index += 1;
            }
            let acc = model.accuracy(joint_test);
            out.epoch_seconds.push(started.elapsed().as_secs_f64());
            info!(
                "{}: T{t} epoch {epoch}: ce {:.4} ll {:.2} acc {:.2}%",
                label.run_id,
                ce_sum / n_batches as f64,
                ll_sum / n_batches as f64,
                acc
            );
            let row = MetricsRow {
                run_id: label.run_id.clone(),
                slt: label.slt.clone(),
                model: "gmr".into(),
                grid_lr: f64::NAN,
                seed,
                sub_task: t,
                epoch,
                train_loss: ce_sum / n_batches as f64,
                gmm_loglik: ll_sum / n_batches as f64,
                test_accuracy: acc,
                inlier_fraction: if inl_n > 0 { inl_sum / inl_n as f64 } else { f64::NAN },
                boundaries: flagged,
                replay_requested: xi,
                replay_accepted: accepted,
            };
            sink(&row)?;
            out.rows.push(row);
        }
        history.push(n_real);
    }
    out.boundaries = detector.boundaries().to_vec();
    Ok((model, out))
}

/// Adds `N(0, noise^2)` to every entry of the selected rows.
pub fn perturb_rows(images: &mut Array2<f64>, rows: &[bool], noise: f64, rng: &mut ChaCha8Rng) {
    if noise <= 0.0 {
        return;
    }
    for (mut row, _) in images.rows_mut().into_iter().zip(rows).filter(|(_, &r)| r) {
        row.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
    }
}

fn history_classes(model: &GmrModel) -> Vec<usize> {
    (0..model.classifier.classes()).collect()
}

/// Conditional replay: classes drawn uniformly among those the classifier
/// currently predicts for unconditional samples, each sample generated from
/// its class's control signal.
fn generate_conditional_replay(
    model: &GmrModel,
    count: usize,
    all_classes: &[usize],
    settings: &GmrSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Generated> {
    let (probe, _) = model.gmm.sample(1000, None, SampleNoise::Gaussian, rng)?;
    let mut seen: Vec<usize> = model.predict(probe.view());
    seen.sort_unstable();
    seen.dedup();
    let pool = if seen.is_empty() { all_classes.to_vec() } else { seen };
    let targets: Vec<usize> = (0..count).map(|_| *pool.choose(rng).expect("non-empty pool")).collect();
    let images = generate_conditional(model, &targets, settings.confidence, settings.control, rng, SampleNoise::Gaussian)?;
    Ok(Generated {
        data: Dataset::new(images, targets, model.classifier.classes())?,
        requested: count,
        drawn: count,
        short: false,
    })
}

/// Mean log-likelihood of training data vs. of fresh model samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingReport {
    pub train_mean_loglik: f64,
    pub sample_mean_loglik: f64,
    /// Standard error of `sample_mean_loglik`.
    pub sample_std_error: f64,
    pub samples: usize,
}

impl SamplingReport {
    /// Generated samples score no worse than training data minus three standard errors.
    pub fn bound_holds(&self) -> bool {
        self.sample_mean_loglik >= self.train_mean_loglik - 3.0 * self.sample_std_error
    }
}

/// Compares fresh model samples with the training set as the model saw it,
/// i.e. with `input_noise` applied.
pub fn sampling_report(
    model: &GmrModel,
    train: &Dataset,
    input_noise: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SamplingReport> {
    let mut images = train.images.clone();
    perturb_rows(&mut images, &vec![true; train.len()], input_noise, rng);
    let train_ll = model.log_likelihoods(images.view());
    let (xs, _) = model.gmm.sample(samples, None, SampleNoise::Gaussian, rng)?;
    let gen_ll = model.log_likelihoods(xs.view());
    let (mean, sd) = crate::math::mean_std(&gen_ll);
    Ok(SamplingReport {
        train_mean_loglik: train_ll.iter().sum::<f64>() / train_ll.len().max(1) as f64,
        sample_mean_loglik: mean,
        sample_std_error: sd / (samples as f64).sqrt(),
        samples,
    })
}
