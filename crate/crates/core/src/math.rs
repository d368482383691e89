use ndarray::{Array1, ArrayView1};

pub fn log_sum_exp(values: ArrayView1<f64>) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `exp(v)` with results below `e^-80` flushed to zero, which keeps
/// subnormals out of later matrix products. Relative effect is below 1e-34.
pub fn exp_flushed(v: f64) -> f64 {
    if v < -80.0 {
        0.0
    } else {
        v.exp()
    }
}

pub fn softmax(values: ArrayView1<f64>) -> Array1<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = values.mapv(|v| exp_flushed(v - max));
    let sum = out.sum();
    out /= sum;
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer), giving
/// independent deterministic seeds for shuffles, sampling and init.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample mean and sample standard deviation (n-1); std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lse_is_stable_for_large_magnitudes() {
        let v = array![1e3, 1e3 - 1.0, -1e3];
        let l = log_sum_exp(v.view());
        assert!((l - (1e3 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
        assert!(log_sum_exp(array![-1e5, -1e5].view()).is_finite());
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(array![0.1, 0.7, 0.2].view()), 1);
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
    }

    #[test]
    fn mean_std_degenerate() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
