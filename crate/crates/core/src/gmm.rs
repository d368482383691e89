//! Diagonal-covariance Gaussian mixture trained by stochastic gradient ascent
//! on the log-likelihood.
//!
//! Mixture weights are stored as unconstrained logits (`pi = softmax(logits)`),
//! standard deviations are the trained scale parameters and are clamped to a
//! floor after every step.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GmrError, Result};
use crate::math::{argmax, exp_flushed, log_sum_exp, softmax};

/// Initialization of a fresh mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmInit {
    pub centroid_low: f64,
    pub centroid_high: f64,
    pub std_dev: f64,
}

impl Default for GmmInit {
    fn default() -> Self {
        Self { centroid_low: 0.4, centroid_high: 0.6, std_dev: 0.5 }
    }
}

/// How responsibilities are formed from the component log-densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResponsibilityMode {
    /// `softmax_k(ln N_k(x))`, mixture weights ignored.
    #[default]
    Unweighted,
    /// `softmax_k(ln pi_k + ln N_k(x))`, the usual posterior.
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weight_logits: Array1<f64>,
    pub centroids: Array2<f64>,
    pub std_devs: Array2<f64>,
}

/// Gradient of the batch-mean log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmGradient {
    pub weight_logits: Array1<f64>,
    pub centroids: Array2<f64>,
    pub std_devs: Array2<f64>,
}

impl GmmGradient {
    fn is_finite(&self) -> bool {
        self.weight_logits.iter().all(|v| v.is_finite())
            && self.centroids.iter().all(|v| v.is_finite())
            && self.std_devs.iter().all(|v| v.is_finite())
    }
}

/// Log-likelihood of a batch: `total = sum_i ln sum_k pi_k N_k(x_i)`.
#[derive(Debug, Clone)]
pub struct BatchLikelihood {
    pub per_sample: Array1<f64>,
    pub total: f64,
}

impl BatchLikelihood {
    pub fn mean(&self) -> f64 {
        self.total / self.per_sample.len() as f64
    }
}

/// How a gradient becomes a parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    /// `theta += lr * grad` on the batch-mean log-likelihood.
    Plain,
    /// Ascent on the batch-summed log-likelihood with each centroid and
    /// standard-deviation gradient scaled by the inverse diagonal Fisher
    /// information of a Gaussian (`sigma^2` and `sigma^2 / 2`). The step on a
    /// component then no longer grows with its precision.
    #[default]
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub sigma_min: f64,
    pub rule: UpdateRule,
}

/// Result of one SGD step; likelihoods are those of the parameters before the update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub likelihood: BatchLikelihood,
}

/// Noise source for sampling; `Zero` returns the component centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleNoise {
    #[default]
    Gaussian,
    Zero,
}

impl GmmParams {
    pub fn new(
        weight_logits: Array1<f64>,
        centroids: Array2<f64>,
        std_devs: Array2<f64>,
    ) -> Result<Self> {
        if centroids.dim() != std_devs.dim() || weight_logits.len() != centroids.nrows() {
            return Err(GmrError::Shape(format!(
                "logits {}, centroids {:?}, std_devs {:?}",
                weight_logits.len(),
                centroids.dim(),
                std_devs.dim()
            )));
        }
        if std_devs.iter().any(|&s| !(s > 0.0)) {
            return Err(GmrError::InvalidArgument("standard deviations must be positive".into()));
        }
        Ok(Self { weight_logits, centroids, std_devs })
    }

    pub fn init<R: Rng + ?Sized>(components: usize, dim: usize, init: &GmmInit, rng: &mut R) -> Self {
        let span = init.centroid_high - init.centroid_low;
        let centroids =
            Array2::from_shape_simple_fn((components, dim), || init.centroid_low + span * rng.random::<f64>());
        Self {
            weight_logits: Array1::zeros(components),
            centroids,
            std_devs: Array2::from_elem((components, dim), init.std_dev),
        }
    }

    pub fn components(&self) -> usize {
        self.weight_logits.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn weights(&self) -> Array1<f64> {
        softmax(self.weight_logits.view())
    }

    /// Per-component Gaussian log-normalizer `-1/2 [d ln 2pi + sum_j ln sigma_kj^2]`.
    pub fn log_normalizers(&self) -> Array1<f64> {
        let d = self.dim() as f64;
        self.std_devs
            .rows()
            .into_iter()
            .map(|s| -0.5 * (d * (2.0 * PI).ln() + s.iter().map(|v| 2.0 * v.ln()).sum::<f64>()))
            .collect()
    }

    /// `ln N_k(x)` for every component, without mixture weights.
    pub fn log_joint_densities(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let norms = self.log_normalizers();
        Zip::from(&norms)
            .and(self.centroids.rows())
            .and(self.std_devs.rows())
            .map_collect(|&f, mu, sigma| {
                let quad: f64 = x
                    .iter()
                    .zip(mu)
                    .zip(sigma)
                    .map(|((&xj, &m), &s)| {
                        let z = (xj - m) / s;
                        z * z
                    })
                    .sum();
                f - 0.5 * quad
            })
    }

    /// `ln N_k(x_i)` for a whole batch (`B×K`), computed with two matrix products.
    pub fn batch_log_densities(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        let precision = self.std_devs.mapv(|s| 1.0 / (s * s));
        let weighted_mu = &self.centroids * &precision;
        let offsets: Array1<f64> = self.log_normalizers()
            - 0.5 * (&self.centroids * &weighted_mu).sum_axis(Axis(1));
        let squared = batch.mapv(|v| v * v);
        let mut out = batch.dot(&weighted_mu.t());
        out.scaled_add(-0.5, &squared.dot(&precision.t()));
        out += &offsets;
        out
    }

    fn log_weights(&self) -> Array1<f64> {
        let lse = log_sum_exp(self.weight_logits.view());
        self.weight_logits.mapv(|l| l - lse)
    }

    pub fn log_likelihood(&self, batch: ArrayView2<f64>) -> BatchLikelihood {
        let mut joint = self.batch_log_densities(batch);
        joint += &self.log_weights();
        let per_sample: Array1<f64> = joint.rows().into_iter().map(log_sum_exp).collect();
        BatchLikelihood { total: per_sample.sum(), per_sample }
    }

    pub fn responsibilities(&self, x: ArrayView1<f64>, mode: ResponsibilityMode) -> Array1<f64> {
        let mut logits = self.log_joint_densities(x);
        if mode == ResponsibilityMode::Weighted {
            logits += &self.log_weights();
        }
        softmax(logits.view())
    }

    pub fn batch_responsibilities(&self, batch: ArrayView2<f64>, mode: ResponsibilityMode) -> Array2<f64> {
        self.responsibilities_from(self.batch_log_densities(batch), mode)
    }

    /// Responsibilities from precomputed `batch_log_densities`.
    pub fn responsibilities_from(&self, mut log_densities: Array2<f64>, mode: ResponsibilityMode) -> Array2<f64> {
        if mode == ResponsibilityMode::Weighted {
            log_densities += &self.log_weights();
        }
        for mut row in log_densities.rows_mut() {
            let s = softmax(row.view());
            row.assign(&s);
        }
        log_densities
    }

    /// Analytic gradient of the batch-mean log-likelihood w.r.t. logits,
    /// centroids and standard deviations.
    pub fn gradient(&self, batch: ArrayView2<f64>) -> Result<(GmmGradient, BatchLikelihood)> {
        let (post, likelihood) = self.posterior(self.batch_log_densities(batch))?;
        Ok((self.weighted_gradient(batch, &post), likelihood))
    }

    /// Gradient with each sample's posterior replaced by a grid neighbourhood
    /// kernel of width `radius` around its best component.
    pub fn smoothed_gradient(
        &self,
        batch: ArrayView2<f64>,
        grid: &ComponentGrid,
        radius: f64,
    ) -> Result<(GmmGradient, BatchLikelihood)> {
        let (post, likelihood) = self.posterior(self.batch_log_densities(batch))?;
        Ok((self.weighted_gradient(batch, &smooth(post, grid, radius)), likelihood))
    }

    /// Posterior `softmax_k(ln pi_k + ln N_k(x_i))` and the batch likelihood.
    fn posterior(&self, log_densities: Array2<f64>) -> Result<(Array2<f64>, BatchLikelihood)> {
        if log_densities.nrows() == 0 {
            return Err(GmrError::EmptyDataset);
        }
        let mut post = log_densities;
        post += &self.log_weights();
        let mut per_sample = Array1::zeros(post.nrows());
        for (mut row, ll) in post.rows_mut().into_iter().zip(per_sample.iter_mut()) {
            *ll = log_sum_exp(row.view());
            let shift = *ll;
            row.mapv_inplace(|v| exp_flushed(v - shift));
        }
        Ok((post, BatchLikelihood { total: per_sample.sum(), per_sample }))
    }

    /// `sum_i sum_k post_ik d ln(pi_k N_k(x_i)) / n` for rows of `post` on the simplex.
    fn weighted_gradient(&self, batch: ArrayView2<f64>, post: &Array2<f64>) -> GmmGradient {
        let n = batch.nrows();
        let inv_n = 1.0 / n as f64;
        let mass = post.sum_axis(Axis(0));
        let first = post.t().dot(&batch);
        let second = post.t().dot(&batch.mapv(|v| v * v));

        let pi = self.weights();
        let weight_logits = (&mass - &(n as f64 * &pi)) * inv_n;

        let mut centroids = Array2::zeros(self.centroids.dim());
        let mut std_devs = Array2::zeros(self.std_devs.dim());
        for k in 0..self.components() {
            let w = mass[k];
            Zip::from(centroids.row_mut(k))
                .and(std_devs.row_mut(k))
                .and(self.centroids.row(k))
                .and(self.std_devs.row(k))
                .and(first.row(k))
                .and(second.row(k))
                .for_each(|gm, gs, &mu, &s, &s1, &s2| {
                    let var = s * s;
                    *gm = (s1 - w * mu) / var * inv_n;
                    let spread = s2 - 2.0 * mu * s1 + w * mu * mu;
                    *gs = (spread / (var * s) - w / s) * inv_n;
                });
        }
        GmmGradient { weight_logits, centroids, std_devs }
    }

    /// One plain ascent step on the batch-mean log-likelihood followed by the
    /// sigma floor.
    pub fn train_step(
        &mut self,
        batch: ArrayView2<f64>,
        lr: f64,
        sigma_min: f64,
        batch_index: usize,
    ) -> Result<StepOutput> {
        let config = StepConfig { lr, sigma_min, rule: UpdateRule::Plain };
        self.step_from(batch, self.batch_log_densities(batch), &config, None, batch_index)
    }

    /// One update from precomputed `batch_log_densities` of `batch`, optionally
    /// with the neighbourhood-smoothed posterior. A non-finite gradient leaves
    /// the parameters untouched.
    pub fn step_from(
        &mut self,
        batch: ArrayView2<f64>,
        log_densities: Array2<f64>,
        config: &StepConfig,
        smoothing: Option<(&ComponentGrid, f64)>,
        batch_index: usize,
    ) -> Result<StepOutput> {
        if !(config.lr >= 0.0) {
            return Err(GmrError::BadLearningRate(config.lr));
        }
        let (mut post, likelihood) = self.posterior(log_densities)?;
        if let Some((grid, radius)) = smoothing {
            post = smooth(post, grid, radius);
        }
        let mut grad = self.weighted_gradient(batch, &post);
        if !grad.is_finite() || !likelihood.total.is_finite() {
            return Err(GmrError::NonFiniteGradient { batch: batch_index });
        }
        let lr = match config.rule {
            UpdateRule::Plain => config.lr,
            UpdateRule::Natural => {
                let var = self.std_devs.mapv(|s| s * s);
                grad.centroids *= &var;
                grad.std_devs *= &(var * 0.5);
                config.lr * batch.nrows() as f64
            }
        };
        self.apply(&grad, lr, config.sigma_min);
        Ok(StepOutput { likelihood })
    }

    pub fn apply(&mut self, grad: &GmmGradient, lr: f64, sigma_min: f64) {
        self.weight_logits.scaled_add(lr, &grad.weight_logits);
        self.centroids.scaled_add(lr, &grad.centroids);
        self.std_devs.scaled_add(lr, &grad.std_devs);
        self.clamp_std_devs(sigma_min);
    }

    pub fn clamp_std_devs(&mut self, sigma_min: f64) {
        self.std_devs.mapv_inplace(|s| if s < sigma_min || s.is_nan() { sigma_min } else { s });
    }

    /// Draws `count` samples: `k ~ Multinomial(weights)`, `x = sigma_k * z + mu_k`.
    /// `weights_override` replaces the mixture weights (class-conditional sampling).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        weights_override: Option<ArrayView1<f64>>,
        noise: SampleNoise,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<usize>)> {
        let weights = match weights_override {
            Some(w) => {
                if w.len() != self.components() {
                    return Err(GmrError::Shape(format!(
                        "override has {} entries for {} components",
                        w.len(),
                        self.components()
                    )));
                }
                let sum = w.sum();
                if (sum - 1.0).abs() > 1e-6 || w.iter().any(|&v| !(v >= 0.0)) {
                    return Err(GmrError::NotSimplex(sum));
                }
                w.to_owned()
            }
            None => self.weights(),
        };
        let dist = WeightedIndex::new(weights.iter().copied())
            .map_err(|e| GmrError::InvalidArgument(e.to_string()))?;
        let mut out = Array2::zeros((count, self.dim()));
        let mut picks = Vec::with_capacity(count);
        for mut row in out.rows_mut() {
            let k = dist.sample(rng);
            picks.push(k);
            let mu = self.centroids.row(k);
            let sigma = self.std_devs.row(k);
            for ((dst, &m), &s) in row.iter_mut().zip(mu).zip(sigma) {
                let z: f64 = match noise {
                    SampleNoise::Gaussian => rng.sample(StandardNormal),
                    SampleNoise::Zero => 0.0,
                };
                *dst = s * z + m;
            }
        }
        Ok((out, picks))
    }

    /// Smallest standard deviation entry.
    pub fn min_std_dev(&self) -> f64 {
        self.std_devs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Parameters of a GMM coupled with a `C`-class linear head: `2Kd + CK + C`.
pub fn gmr_parameter_count(dim: usize, components: usize, classes: usize) -> usize {
    2 * components * dim + classes * components + classes
}

fn smooth(mut post: Array2<f64>, grid: &ComponentGrid, radius: f64) -> Array2<f64> {
    for mut row in post.rows_mut() {
        let best = argmax(row.view());
        row.assign(&grid.kernel(best, radius));
    }
    post
}

/// Components laid out row-major on a near-square 2-D grid, used to smooth
/// early training over neighbouring components.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGrid {
    components: usize,
    cols: usize,
}

impl ComponentGrid {
    pub fn new(components: usize) -> Self {
        let cols = (components as f64).sqrt().ceil().max(1.0) as usize;
        Self { components, cols }
    }

    fn coords(&self, k: usize) -> (f64, f64) {
        ((k / self.cols) as f64, (k % self.cols) as f64)
    }

    /// Normalized Gaussian kernel over grid distance to `center`. A
    /// non-positive radius gives the indicator of `center`.
    pub fn kernel(&self, center: usize, radius: f64) -> Array1<f64> {
        let mut out = Array1::zeros(self.components);
        if !(radius > 0.0) {
            out[center] = 1.0;
            return out;
        }
        let (r0, c0) = self.coords(center);
        let scale = -0.5 / (radius * radius);
        for (k, v) in out.iter_mut().enumerate() {
            let (r, c) = self.coords(k);
            *v = (scale * ((r - r0).powi(2) + (c - c0).powi(2))).exp();
        }
        let total = out.sum();
        out /= total;
        out
    }
}

/// Neighbourhood radius schedule: geometric decay from `start` to `end` over
/// `steps` batches, after which smoothing is switched off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annealing {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl Annealing {
    pub fn radius(&self, step: usize) -> Option<f64> {
        if step >= self.steps || !(self.start > 0.0) {
            return None;
        }
        let frac = step as f64 / self.steps as f64;
        Some(self.start * (self.end / self.start).powf(frac))
    }
}

/// Exponentially weighted mean/variance of per-sample log-likelihoods, used
/// for outlier and sub-task boundary detection.
#[derive(Debug, Clone, PartialEq)]
pub struct LossStats {
    pub mean: f64,
    pub var: f64,
    pub ema_alpha: f64,
    pub warmup: usize,
    pub samples_seen: usize,
}

impl LossStats {
    pub fn new(ema_alpha: f64, warmup: usize) -> Self {
        Self { mean: 0.0, var: 0.0, ema_alpha, warmup, samples_seen: 0 }
    }

    pub fn update_one(&mut self, value: f64) {
        if self.samples_seen == 0 {
            self.mean = value;
            self.var = 0.0;
        } else {
            let delta = value - self.mean;
            self.mean += self.ema_alpha * delta;
            self.var = (1.0 - self.ema_alpha) * (self.var + self.ema_alpha * delta * delta);
        }
        self.samples_seen += 1;
    }

    pub fn update(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.update_one(v);
        }
    }

    pub fn is_warm(&self) -> bool {
        self.samples_seen >= self.warmup
    }

    pub fn std_dev(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }

    pub fn threshold(&self, c: f64) -> f64 {
        if c == f64::INFINITY {
            return f64::NEG_INFINITY;
        }
        self.mean - c * self.std_dev()
    }

    /// Strictly below `mean - c * std`. Always `false` before warmup.
    pub fn is_outlier(&self, loss: f64, c: f64) -> bool {
        self.is_warm() && loss < self.threshold(c)
    }

    /// Share of `losses` that are not outliers (1.0 for an empty slice).
    pub fn inlier_fraction(&self, losses: impl IntoIterator<Item = f64>, c: f64) -> f64 {
        let (mut n, mut inl) = (0usize, 0usize);
        for l in losses {
            n += 1;
            if !self.is_outlier(l, c) {
                inl += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            inl as f64 / n as f64
        }
    }
}
