//! Elastic weight consolidation baseline: a ReLU MLP trained with Adam on
//! cross-entropy plus a quadratic penalty toward earlier solutions.

use std::fmt::Debug;
use std::time::Instant;

use log::info;
use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{iterate_batches, one_hot, Dataset, SubTaskData};
use crate::error::{GmrError, Result};
use crate::math::derive_seed;
use crate::metrics::MetricsRow;
use crate::replay::RunLabel;

/// Floating-point element type of the network.
pub trait Real: Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static {}

fn cast<A: Real>(v: f64) -> A {
    A::from_f64(v).expect("representable")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<A> {
    /// `out×in`
    pub weights: Array2<A>,
    pub bias: Array1<A>,
}

/// Parameters of a fully connected ReLU network with a linear output layer.
/// Also used for gradients, Fisher diagonals and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<A> {
    pub layers: Vec<Layer<A>>,
}

impl<A: Real> Mlp<A> {
    /// `sizes = [input, hidden..., output]`. Weights are uniform in
    /// `±sqrt(6 / fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((w[1], w[0]), || cast(rng.random_range(-bound..bound))),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { weights: Array2::zeros(l.weights.dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    /// Flat view over all parameters, layer by layer, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = &A> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut A> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, input: ArrayView2<A>) -> Vec<Array2<A>> {
        let mut acts: Vec<Array2<A>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { input } else { acts[i - 1usize].view() };
            let mut z = prev.dot(&layer.weights.t());
            z.rows_mut().into_iter().for_each(|mut r| r.zip_mut_with(&layer.bias, |v, &b| *v = *v + b));
            if i != last {
                z.mapv_inplace(|v| if v > A::zero() { v } else { A::zero() });
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, input: ArrayView2<A>) -> Array2<A> {
        self.activations(input).pop().expect("at least one layer")
    }

    pub fn predict(&self, input: ArrayView2<A>) -> Vec<usize> {
        self.logits(input)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Backpropagates per-sample output deltas `d loss_i / d logits_i` and
    /// hands each layer's `(input activations, deltas)` to `visit`, last layer first.
    fn backprop(&self, input: ArrayView2<A>, acts: &[Array2<A>], mut delta: Array2<A>, mut visit: impl FnMut(usize, ArrayView2<A>, &Array2<A>)) {
        for i in (0..self.layers.len()).rev() {
            let prev = if i == 0 { input } else { acts[i - 1].view() };
            visit(i, prev, &delta);
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                ndarray::Zip::from(&mut back).and(&acts[i - 1]).for_each(|d, &a| {
                    if a <= A::zero() {
                        *d = A::zero();
                    }
                });
                delta = back;
            }
        }
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_gradient(&self, input: ArrayView2<A>, targets: ArrayView2<A>) -> (f64, Mlp<A>) {
        let n = input.nrows();
        let acts = self.activations(input);
        let probs = softmax_rows(acts.last().expect("layers"));
        let loss = cross_entropy(&probs, targets);
        let inv_n = cast::<A>(1.0 / n as f64);
        let delta = (&probs - &targets) * inv_n;
        let mut grad = self.zeros_like();
        self.backprop(input, &acts, delta, |i, prev, d| {
            grad.layers[i].weights = d.t().dot(&prev);
            grad.layers[i].bias = d.sum_axis(Axis(0));
        });
        (loss, grad)
    }

    /// Accuracy in percent, evaluated in chunks.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return f64::NAN;
        }
        let mut hits = 0usize;
        for start in (0..data.len()).step_by(1000) {
            let end = (start + 1000).min(data.len());
            let x = to_real::<A>(data.images.slice(ndarray::s![start..end, ..]));
            hits += self.predict(x.view()).iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
        }
        100.0 * hits as f64 / data.len() as f64
    }
}

fn softmax_rows<A: Real>(logits: &Array2<A>) -> Array2<A> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(A::neg_infinity(), A::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn cross_entropy<A: Real>(probs: &Array2<A>, targets: ArrayView2<A>) -> f64 {
    let tiny = A::min_positive_value();
    let total: f64 = ndarray::Zip::from(probs)
        .and(targets)
        .fold(0.0, |acc, &p, &t| acc - (t * p.max(tiny).ln()).to_f64().expect("finite"));
    total / probs.nrows() as f64
}

pub fn to_real<A: Real>(x: ArrayView2<f64>) -> Array2<A> {
    x.mapv(cast)
}

/// Parameters and Fisher diagonal snapshotted after one sub-task.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor<A> {
    pub params: Mlp<A>,
    pub fisher: Mlp<A>,
}

/// `(lambda / 2) * sum_t sum_i F_i^t (theta_i - theta_i^t)^2`.
pub fn ewc_penalty<A: Real>(params: &Mlp<A>, anchors: &[Anchor<A>], lambda: f64) -> f64 {
    let mut total = 0.0;
    for anchor in anchors {
        for ((&p, &a), &f) in params.values().zip(anchor.params.values()).zip(anchor.fisher.values()) {
            let d = (p - a).to_f64().expect("finite");
            total += f.to_f64().expect("finite") * d * d;
        }
    }
    0.5 * lambda * total
}

/// Adds `lambda * sum_t F^t (theta - theta^t)` to `grad`.
pub fn add_penalty_gradient<A: Real>(grad: &mut Mlp<A>, params: &Mlp<A>, anchors: &[Anchor<A>], lambda: f64) {
    let lambda = cast::<A>(lambda);
    for anchor in anchors {
        for (((g, &p), &a), &f) in grad.values_mut().zip(params.values()).zip(anchor.params.values()).zip(anchor.fisher.values()) {
            *g = *g + lambda * f * (p - a);
        }
    }
}

/// Cross-entropy on the batch plus the penalty over all anchors, with gradient.
pub fn ewc_loss<A: Real>(
    params: &Mlp<A>,
    input: ArrayView2<A>,
    targets: ArrayView2<A>,
    anchors: &[Anchor<A>],
    lambda: f64,
) -> (f64, Mlp<A>) {
    let (ce, mut grad) = params.loss_and_gradient(input, targets);
    add_penalty_gradient(&mut grad, params, anchors, lambda);
    (ce + ewc_penalty(params, anchors, lambda), grad)
}

/// Empirical Fisher diagonal: the mean over samples of the squared gradient
/// of `ln y_true` with respect to each parameter.
pub fn compute_fisher_diag<A: Real>(params: &Mlp<A>, data: &Dataset) -> Result<Mlp<A>> {
    if data.is_empty() {
        return Err(GmrError::EmptyDataset);
    }
    let classes = params.output_size();
    let mut fisher = params.zeros_like();
    for start in (0..data.len()).step_by(500) {
        let end = (start + 500).min(data.len());
        let x = to_real::<A>(data.images.slice(ndarray::s![start..end, ..]));
        let t = one_hot(&data.labels[start..end], classes).mapv(cast::<A>);
        let acts = params.activations(x.view());
        let probs = softmax_rows(acts.last().expect("layers"));
        // Per-sample deltas; the sign is irrelevant once squared.
        let delta = &probs - &t;
        params.backprop(x.view(), &acts, delta, |i, prev, d| {
            let d2 = d.mapv(|v| v * v);
            let a2 = prev.mapv(|v| v * v);
            fisher.layers[i].weights.scaled_add(A::one(), &d2.t().dot(&a2));
            fisher.layers[i].bias.scaled_add(A::one(), &d2.sum_axis(Axis(0)));
        });
    }
    let inv_n = cast::<A>(1.0 / data.len() as f64);
    fisher.values_mut().for_each(|v| *v = *v * inv_n);
    Ok(fisher)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<A> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Mlp<A>,
    v: Mlp<A>,
    t: i32,
}

impl<A: Real> Adam<A> {
    pub fn new(params: &Mlp<A>, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Mlp<A>, grad: &Mlp<A>) {
        self.t += 1;
        let (b1, b2) = (cast::<A>(self.beta1), cast::<A>(self.beta2));
        let one = A::one();
        let c1 = cast::<A>(1.0 - self.beta1.powi(self.t));
        let c2 = cast::<A>(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (cast::<A>(self.lr), cast::<A>(self.epsilon));
        for (((p, &g), m), v) in params.values_mut().zip(grad.values()).zip(self.m.values_mut()).zip(self.v.values_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EwcSettings {
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// `None` uses `1 / lr`.
    pub lambda: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for EwcSettings {
    fn default() -> Self {
        Self { hidden: vec![800, 800, 800], lr: 1e-3, lambda: None, epochs: 10, batch_size: 100 }
    }
}

impl EwcSettings {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(1.0 / self.lr)
    }
}

/// Trained network, its anchors, metric rows and per-epoch wall time.
pub struct EwcRun<A> {
    pub model: Mlp<A>,
    pub anchors: Vec<Anchor<A>>,
    pub rows: Vec<MetricsRow>,
    pub epoch_seconds: Vec<f64>,
}

/// Trains over the sub-tasks in order, snapshotting an anchor after each.
/// Each epoch's row is passed to `sink`.
pub fn run_ewc<A: Real, I>(
    sub_tasks: I,
    joint_test: &Dataset,
    dim: usize,
    classes: usize,
    settings: &EwcSettings,
    label: &RunLabel,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<EwcRun<A>>
where
    I: IntoIterator<Item = SubTaskData>,
{
    let seed = label.seed;
    let mut sizes = vec![dim];
    sizes.extend(&settings.hidden);
    sizes.push(classes);
    let mut model = Mlp::<A>::new(&sizes, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 11)));
    let lambda = settings.lambda();
    let mut anchors: Vec<Anchor<A>> = Vec::new();
    let mut rows = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut batch_index = 0usize;
    for (t0, task) in sub_tasks.into_iter().enumerate() {
        let t = t0 + 1;
        let mut adam = Adam::new(&model, settings.lr);
        for epoch in 1..=settings.epochs {
            let started = Instant::now();
            let (mut loss_sum, mut n_batches) = (0.0, 0usize);
            let shuffle = derive_seed(seed, 2000 + (t as u64) * 100_000 + epoch as u64);
            for batch in iterate_batches(&task.train, settings.batch_size, shuffle)? {
                let x = to_real::<A>(batch.images.view());
                let y = batch.targets.mapv(cast::<A>);
                let (loss, grad) = ewc_loss(&model, x.view(), y.view(), &anchors, lambda);
                if !loss.is_finite() {
                    return Err(GmrError::NonFiniteLoss { batch: batch_index });
                }
                adam.step(&mut model, &grad);
                loss_sum += loss;
                n_batches += 1;
                batch_index += 1;
            }
            let acc = model.accuracy(joint_test);
            epoch_seconds.push(started.elapsed().as_secs_f64());
            info!("{}: T{t} epoch {epoch}: loss {:.4} acc {:.2}%", label.run_id, loss_sum / n_batches as f64, acc);
            let row = MetricsRow {
                run_id: label.run_id.clone(),
                slt: label.slt.clone(),
                model: "ewc".into(),
                grid_lr: settings.lr,
                seed,
                sub_task: t,
                epoch,
                train_loss: loss_sum / n_batches as f64,
                gmm_loglik: f64::NAN,
                test_accuracy: acc,
                inlier_fraction: f64::NAN,
                boundaries: 0,
                replay_requested: 0,
                replay_accepted: 0,
            };
            sink(&row)?;
            rows.push(row);
        }
        let fisher = compute_fisher_diag(&model, &task.train)?;
        anchors.push(Anchor { params: model.clone(), fisher });
    }
    Ok(EwcRun { model, anchors, rows, epoch_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(seed: u64) -> (Mlp<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::<f64>::new(&[4, 5, 3, 3], &mut rng);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        (mlp, x, one_hot(&labels, 3))
    }

    fn max_rel_error(analytic: &Mlp<f64>, mut f: impl FnMut(&Mlp<f64>) -> f64, at: &Mlp<f64>) -> f64 {
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let count = at.parameter_count();
        for idx in 0..count {
            let mut plus = at.clone();
            *plus.values_mut().nth(idx).unwrap() += h;
            let mut minus = at.clone();
            *minus.values_mut().nth(idx).unwrap() -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = *analytic.values().nth(idx).unwrap();
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let (mlp, x, t) = tiny(1);
        let (_, grad) = mlp.loss_and_gradient(x.view(), t.view());
        let err = max_rel_error(&grad, |m| m.loss_and_gradient(x.view(), t.view()).0, &mlp);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let (mlp, x, t) = tiny(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchors: Vec<Anchor<f64>> = (0..2)
            .map(|_| {
                let mut params = mlp.clone();
                params.values_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
                let mut fisher = mlp.zeros_like();
                fisher.values_mut().for_each(|v| *v = rng.random_range(0.0..2.0));
                Anchor { params, fisher }
            })
            .collect();
        let (_, grad) = ewc_loss(&mlp, x.view(), t.view(), &anchors, 3.0);
        let err = max_rel_error(&grad, |m| ewc_loss(m, x.view(), t.view(), &anchors, 3.0).0, &mlp);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn penalty_arithmetic() {
        let mlp = Mlp { layers: vec![Layer { weights: array![[1.0]], bias: array![1.0] }] };
        let anchor = Anchor {
            params: Mlp { layers: vec![Layer { weights: array![[0.0]], bias: array![0.0] }] },
            fisher: Mlp { layers: vec![Layer { weights: array![[1.0]], bias: array![0.0] }] },
        };
        assert_eq!(0.5 + ewc_penalty(&mlp, &[anchor], 2.0), 1.5);
        assert_eq!(ewc_penalty(&mlp, &[], 2.0), 0.0);
    }

    #[test]
    fn penalty_vanishes_at_anchor() {
        let (mlp, _, _) = tiny(4);
        let mut fisher = mlp.zeros_like();
        fisher.values_mut().for_each(|v| *v = 1.7);
        let anchors = vec![Anchor { params: mlp.clone(), fisher: fisher.clone() }, Anchor { params: mlp.clone(), fisher }];
        assert_eq!(ewc_penalty(&mlp, &anchors, 10.0), 0.0);
    }

    #[test]
    fn logistic_fisher_matches_symbolic() {
        // One weight, no hidden layer, two classes with logits (w x, 0) and
        // the bias pinned to zero: d ln y_true / dw = (t0 - y0) x.
        let w = 0.7;
        let mlp = Mlp { layers: vec![Layer { weights: array![[w], [0.0]], bias: array![0.0, 0.0] }] };
        let xs = [0.5, -1.0, 2.0, 0.3];
        let labels = vec![0, 1, 0, 1];
        let data = Dataset::new(Array2::from_shape_vec((4, 1), xs.to_vec()).unwrap(), labels.clone(), 2).unwrap();
        let fisher = compute_fisher_diag(&mlp, &data).unwrap();
        let expected: f64 = xs
            .iter()
            .zip(&labels)
            .map(|(&x, &l)| {
                let y0 = 1.0 / (1.0 + (-w * x).exp());
                let t0 = if l == 0 { 1.0 } else { 0.0 };
                (t0 - y0).powi(2) * x * x
            })
            .sum::<f64>()
            / 4.0;
        assert!((fisher.layers[0].weights[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn saturated_model_has_zero_fisher() {
        let mlp = Mlp { layers: vec![Layer { weights: array![[0.0], [0.0]], bias: array![800.0, 0.0] }] };
        let data = Dataset::new(array![[1.0], [2.0]], vec![0, 0], 2).unwrap();
        let fisher = compute_fisher_diag(&mlp, &data).unwrap();
        assert!(fisher.values().all(|&v| v == 0.0));
    }

    #[test]
    fn fisher_ignores_sample_order() {
        let (mlp, x, _) = tiny(5);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let a = Dataset::new(x.clone(), labels.clone(), 3).unwrap();
        let rev: Vec<usize> = (0..6).rev().collect();
        let b = a.select_rows(&rev);
        let fa = compute_fisher_diag(&mlp, &a).unwrap();
        let fb = compute_fisher_diag(&mlp, &b).unwrap();
        for (u, v) in fa.values().zip(fb.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    fn blobs(classes: &[usize], per_class: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Array2::zeros((classes.len() * per_class, 6));
        let mut labels = Vec::new();
        for (i, mut row) in images.rows_mut().into_iter().enumerate() {
            let c = classes[i / per_class];
            row.mapv_inplace(|_| rng.random_range(0.0..0.3));
            row[c] += 1.0;
            labels.push(c);
        }
        Dataset::new(images, labels, 6).unwrap()
    }

    fn tasks(split: &[&[usize]]) -> Vec<SubTaskData> {
        split
            .iter()
            .map(|cs| {
                let train = blobs(cs, 40, cs[0] as u64);
                SubTaskData { classes: cs.to_vec(), nu: train.len(), test: blobs(cs, 10, 99), train }
            })
            .collect()
    }

    #[test]
    fn anchor_count_tracks_sub_tasks() {
        let test = blobs(&[0, 1, 2, 3, 4, 5], 10, 7);
        let settings = EwcSettings { hidden: vec![8], epochs: 2, batch_size: 16, ..EwcSettings::default() };
        let label = RunLabel { run_id: "t".into(), slt: "x".into(), seed: 1 };
        let run = run_ewc::<f64, _>(tasks(&[&[0, 1], &[2, 3], &[4, 5]]), &test, 6, 6, &settings, &label, &mut |_| Ok(())).unwrap();
        assert_eq!(run.anchors.len(), 3);
        assert_eq!(run.rows.len(), 6);
    }

    #[test]
    fn zero_lambda_single_task_is_plain_training() {
        let test = blobs(&[0, 1, 2], 10, 7);
        let label = RunLabel { run_id: "t".into(), slt: "x".into(), seed: 3 };
        let settings = EwcSettings { hidden: vec![8], epochs: 3, batch_size: 16, lambda: Some(0.0), ..EwcSettings::default() };
        let run = run_ewc::<f64, _>(tasks(&[&[0, 1, 2]]), &test, 6, 6, &settings, &label, &mut |_| Ok(())).unwrap();

        // Control: same seeds and data, bare cross-entropy with Adam.
        let mut model = Mlp::<f64>::new(&[6, 8, 6], &mut ChaCha8Rng::seed_from_u64(derive_seed(3, 11)));
        let mut adam = Adam::new(&model, settings.lr);
        let train = &tasks(&[&[0, 1, 2]])[0].train;
        let mut losses = Vec::new();
        for epoch in 1..=3usize {
            let (mut sum, mut n) = (0.0, 0);
            for batch in iterate_batches(train, 16, derive_seed(3, 2000 + 100_000 + epoch as u64)).unwrap() {
                let (loss, grad) = model.loss_and_gradient(batch.images.view(), batch.targets.view());
                adam.step(&mut model, &grad);
                sum += loss;
                n += 1;
            }
            losses.push(sum / n as f64);
        }
        let logged: Vec<f64> = run.rows.iter().map(|r| r.train_loss).collect();
        assert_eq!(logged, losses);
        assert_eq!(run.model, model);
    }

    #[test]
    fn f32_network_learns_separable_blobs() {
        let data = blobs(&[0, 1, 2, 3], 50, 11);
        let settings = EwcSettings { hidden: vec![16, 16], epochs: 20, batch_size: 20, ..EwcSettings::default() };
        let label = RunLabel { run_id: "t".into(), slt: "x".into(), seed: 5 };
        let task = SubTaskData { classes: vec![0, 1, 2, 3], nu: data.len(), train: data.clone(), test: data.clone() };
        let run = run_ewc::<f32, _>(vec![task], &data, 6, 6, &settings, &label, &mut |_| Ok(())).unwrap();
        assert!(run.model.accuracy(&data) > 95.0);
    }

    proptest! {
        #[test]
        fn penalty_is_nonnegative(shift in -2.0f64..2.0, f in 0.0f64..5.0, lambda in 0.0f64..100.0) {
            let (mlp, _, _) = tiny(9);
            let mut params = mlp.clone();
            params.values_mut().for_each(|v| *v += shift);
            let mut fisher = mlp.zeros_like();
            fisher.values_mut().for_each(|v| *v = f);
            let p = ewc_penalty(&params, &[Anchor { params: mlp, fisher }], lambda);
            prop_assert!(p >= 0.0);
        }
    }
}
