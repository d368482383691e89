//! Linear softmax head over GMM responsibilities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{GmrError, Result};
use crate::math::{argmax, softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `C×K`
    pub weights: Array2<f64>,
    /// `C`
    pub bias: Array1<f64>,
}

/// Mixture weights steering the GMM toward one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub weights: Array1<f64>,
    /// Set when the inverted signal carried no information and the uniform
    /// simplex was returned instead.
    pub degenerate: bool,
}

/// How the raw inverse `W^T (ln o - b)` becomes mixture weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControlNormalization {
    /// Treat the raw inverse as logits. For `W = I`, `b = 0` this returns `o` itself.
    #[default]
    Softmax,
    /// Subtract the minimum and divide by the sum.
    Shift,
}

impl ClassifierParams {
    pub fn zeros(classes: usize, components: usize) -> Self {
        Self { weights: Array2::zeros((classes, components)), bias: Array1::zeros(classes) }
    }

    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(GmrError::Shape(format!("weights {:?} vs bias {}", weights.dim(), bias.len())));
        }
        Ok(Self { weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn forward(&self, gamma: ArrayView1<f64>) -> Array1<f64> {
        let logits = self.weights.dot(&gamma) + &self.bias;
        softmax(logits.view())
    }

    pub fn batch_forward(&self, gammas: ArrayView2<f64>) -> Array2<f64> {
        let mut logits = gammas.dot(&self.weights.t());
        logits += &self.bias;
        for mut row in logits.rows_mut() {
            let s = softmax(row.view());
            row.assign(&s);
        }
        logits
    }

    pub fn predict(&self, gamma: ArrayView1<f64>) -> usize {
        argmax(self.forward(gamma).view())
    }

    pub fn batch_predict(&self, gammas: ArrayView2<f64>) -> Vec<usize> {
        let mut logits = gammas.dot(&self.weights.t());
        logits += &self.bias;
        logits.rows().into_iter().map(argmax).collect()
    }

    /// Mean cross-entropy `-(1/N) sum_i sum_j t_ij ln y_ij`.
    pub fn cross_entropy(&self, gammas: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
        cross_entropy_of(&self.batch_forward(gammas), targets)
    }

    /// Closed-form gradient of the mean cross-entropy; returns `(dW, db, loss)`.
    pub fn gradient(
        &self,
        gammas: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>, f64)> {
        let n = gammas.nrows();
        if n == 0 {
            return Err(GmrError::EmptyDataset);
        }
        if targets.dim() != (n, self.classes()) || gammas.ncols() != self.components() {
            return Err(GmrError::Shape(format!(
                "gammas {:?}, targets {:?}, classifier {}x{}",
                gammas.dim(),
                targets.dim(),
                self.classes(),
                self.components()
            )));
        }
        let probs = self.batch_forward(gammas);
        let loss = cross_entropy_of(&probs, targets);
        let delta = (probs - targets) / n as f64;
        let grad_w = delta.t().dot(&gammas);
        let grad_b = delta.sum_axis(Axis(0));
        Ok((grad_w, grad_b, loss))
    }

    /// One SGD step on the mean cross-entropy. Returns the loss before the update.
    pub fn train_step(
        &mut self,
        gammas: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        lr: f64,
        batch_index: usize,
    ) -> Result<f64> {
        if !(lr >= 0.0) {
            return Err(GmrError::BadLearningRate(lr));
        }
        let (grad_w, grad_b, loss) = self.gradient(gammas, targets)?;
        if !loss.is_finite() {
            return Err(GmrError::NonFiniteLoss { batch: batch_index });
        }
        self.weights.scaled_add(-lr, &grad_w);
        self.bias.scaled_add(-lr, &grad_b);
        Ok(loss)
    }

    /// Target output for `class` with confidence `confidence`, remaining mass spread evenly.
    pub fn target_output(&self, class: usize, confidence: f64) -> Result<Array1<f64>> {
        let c = self.classes();
        if c < 2 || class >= c {
            return Err(GmrError::InvalidArgument(format!("class {class} of {c}")));
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(GmrError::InvalidArgument(format!("confidence {confidence} not in (0,1)")));
        }
        let rest = (1.0 - confidence) / (c - 1) as f64;
        Ok(Array1::from_shape_fn(c, |j| if j == class { confidence } else { rest }))
    }

    /// `W^T (ln o - b)`: the approximate input that would produce output `o`.
    pub fn invert_raw(&self, class: usize, confidence: f64) -> Result<Array1<f64>> {
        let target = self.target_output(class, confidence)?;
        Ok(self.weights.t().dot(&(target.mapv(f64::ln) - &self.bias)))
    }

    /// Control signal for class-conditional sampling. A raw inverse with
    /// (numerically) no spread carries no class information; the uniform
    /// simplex is returned and flagged instead.
    pub fn invert_for_class(
        &self,
        class: usize,
        confidence: f64,
        normalization: ControlNormalization,
    ) -> Result<ControlSignal> {
        let raw = self.invert_raw(class, confidence)?;
        let k = self.components();
        let uniform = || ControlSignal { weights: Array1::from_elem(k, 1.0 / k as f64), degenerate: true };
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = min.abs().max(max.abs()).max(1.0);
        if !(max - min > 1e-12 * scale) {
            return Ok(uniform());
        }
        let weights = match normalization {
            ControlNormalization::Softmax => softmax(raw.view()),
            ControlNormalization::Shift => {
                let shifted = raw.mapv(|v| v - min);
                let sum = shifted.sum();
                shifted / sum
            }
        };
        Ok(ControlSignal { weights, degenerate: false })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

fn cross_entropy_of(probs: &Array2<f64>, targets: ArrayView2<f64>) -> f64 {
    let n = probs.nrows() as f64;
    let total: f64 = probs
        .iter()
        .zip(targets.iter())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(f64::MIN_POSITIVE).ln())
        .sum();
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_uniform_output() {
        let c = ClassifierParams::zeros(4, 3);
        let y = c.forward(array![0.2, 0.3, 0.5].view());
        for v in y.iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
        let t = array![[0.0, 0.0, 1.0, 0.0]];
        assert_abs_diff_eq!(c.cross_entropy(array![[0.2, 0.3, 0.5]].view(), t.view()), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn dominant_bias_wins() {
        let mut c = ClassifierParams::zeros(3, 2);
        c.bias[0] = 10.0;
        let y = c.forward(array![0.5, 0.5].view());
        assert!(y[0] > 0.999);
    }

    #[test]
    fn two_class_hand_case() {
        let c = ClassifierParams::new(array![[1.0], [-1.0]], array![0.0, 0.0]).unwrap();
        let y = c.forward(array![1.0].view());
        assert_abs_diff_eq!(y[0], 0.880_797_077_977_882_4, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.119_202_922_022_117_5, epsilon = 1e-12);
        assert_eq!(c.predict(array![1.0].view()), 0);
    }

    #[test]
    fn predict_argmax_and_ties() {
        // logits ln(0.1), ln(0.7), ln(0.2) reproduce y = (0.1, 0.7, 0.2)
        let c = ClassifierParams::new(Array2::zeros((3, 1)), array![0.1f64.ln(), 0.7f64.ln(), 0.2f64.ln()]).unwrap();
        assert_eq!(c.predict(array![1.0].view()), 1);
        let tie = ClassifierParams::zeros(2, 1);
        assert_eq!(tie.predict(array![1.0].view()), 0);
    }

    #[test]
    fn confident_prediction_has_small_loss() {
        let c = ClassifierParams::new(array![[40.0, 0.0], [0.0, 40.0]], array![0.0, 0.0]).unwrap();
        let loss = c.cross_entropy(array![[1.0, 0.0]].view(), array![[1.0, 0.0]].view());
        assert!(loss < 1e-15, "{loss}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = ClassifierParams::new(
            Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0)),
            Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let gammas = Array2::from_shape_simple_fn((5, 4), || rng.random::<f64>());
        let labels = [0usize, 2, 1, 1, 0];
        let targets = crate::dataio::one_hot(&labels, 3);
        let (gw, gb, _) = c.gradient(gammas.view(), targets.view()).unwrap();
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        for i in 0..3 {
            for k in 0..4 {
                let (mut p, mut m) = (c.clone(), c.clone());
                p.weights[[i, k]] += h;
                m.weights[[i, k]] -= h;
                let num = (p.cross_entropy(gammas.view(), targets.view()) - m.cross_entropy(gammas.view(), targets.view())) / (2.0 * h);
                assert!(rel(gw[[i, k]], num) < 1e-4);
            }
            let (mut p, mut m) = (c.clone(), c.clone());
            p.bias[i] += h;
            m.bias[i] -= h;
            let num = (p.cross_entropy(gammas.view(), targets.view()) - m.cross_entropy(gammas.view(), targets.view())) / (2.0 * h);
            assert!(rel(gb[i], num) < 1e-4);
        }
    }

    #[test]
    fn train_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut c = ClassifierParams::new(
                Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0)),
                Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0)),
            )
            .unwrap();
            let gammas = Array2::from_shape_simple_fn((6, 4), || rng.random::<f64>());
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let targets = crate::dataio::one_hot(&labels, 3);
            let before = c.train_step(gammas.view(), targets.view(), 1e-3, 0).unwrap();
            let after = c.cross_entropy(gammas.view(), targets.view());
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn identity_inverse_softmax_recovers_target() {
        let c = ClassifierParams::new(Array2::eye(10), Array1::zeros(10)).unwrap();
        let sig = c.invert_for_class(3, 0.95, ControlNormalization::Softmax).unwrap();
        assert!(!sig.degenerate);
        for (k, &v) in sig.weights.iter().enumerate() {
            assert_abs_diff_eq!(v, if k == 3 { 0.95 } else { 0.05 / 9.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_inverse_shift_is_one_hot() {
        let c = ClassifierParams::new(Array2::eye(10), Array1::zeros(10)).unwrap();
        let sig = c.invert_for_class(3, 0.95, ControlNormalization::Shift).unwrap();
        assert!(!sig.degenerate);
        for (k, &v) in sig.weights.iter().enumerate() {
            assert_abs_diff_eq!(v, if k == 3 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let c = ClassifierParams::zeros(4, 6);
        for norm in [ControlNormalization::Softmax, ControlNormalization::Shift] {
            let sig = c.invert_for_class(1, 0.95, norm).unwrap();
            assert!(sig.degenerate);
            assert!(sig.weights.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        }
    }

    proptest! {
        #[test]
        fn control_signal_is_a_simplex(seed in any::<u64>(), class in 0usize..4, conf in 0.3f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = ClassifierParams::new(
                Array2::from_shape_simple_fn((4, 7), || rng.random_range(-3.0..3.0)),
                Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0)),
            )
            .unwrap();
            for norm in [ControlNormalization::Softmax, ControlNormalization::Shift] {
                let w = c.invert_for_class(class, conf, norm).unwrap().weights;
                prop_assert!(w.iter().all(|&v| v >= 0.0));
                prop_assert!((w.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inversion_preconditions() {
        let c = ClassifierParams::zeros(1, 3);
        assert!(c.invert_for_class(0, 0.95, ControlNormalization::Softmax).is_err());
        let c = ClassifierParams::zeros(3, 3);
        assert!(c.invert_for_class(0, 1.0, ControlNormalization::Softmax).is_err());
        assert!(c.invert_for_class(0, 0.0, ControlNormalization::Softmax).is_err());
        assert!(c.invert_for_class(5, 0.5, ControlNormalization::Softmax).is_err());
    }
}
