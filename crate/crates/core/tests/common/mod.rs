//! Synthetic IDX datasets for end-to-end tests.

#![allow(dead_code)]

use std::path::Path;

use gmr_core::dataio::{encode_idx, IdxTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 4;

/// Ten classes of `SIDE×SIDE` images; class `c` lights up pixels `c`,
/// `c+3` and `c+7` (mod 16) over a dim background.
pub fn images(per_class: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = SIDE * SIDE;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for label in 0..10u8 {
        for _ in 0..per_class {
            let mut img: Vec<u8> = (0..d).map(|_| rng.random_range(0..30)).collect();
            for j in [label as usize, (label as usize + 3) % d, (label as usize + 7) % d] {
                img[j] = rng.random_range(200..=255);
            }
            pixels.extend(img);
            labels.push(label);
        }
    }
    (pixels, labels)
}

fn write_pair(dir: &Path, prefix: &str, pixels: Vec<u8>, labels: Vec<u8>) {
    let n = labels.len();
    let img = IdxTensor { dims: vec![n, SIDE, SIDE], data: pixels };
    let lab = IdxTensor { dims: vec![n], data: labels };
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx(&img).unwrap()).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx(&lab).unwrap()).unwrap();
}

/// Writes `train-*` and `t10k-*` IDX pairs into `dir`.
pub fn write_dataset(dir: &Path, per_class: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let (p, l) = images(per_class, seed);
    write_pair(dir, "train", p, l);
    let (p, l) = images((per_class / 3).max(1), seed + 1);
    write_pair(dir, "t10k", p, l);
}

/// Config text for a fast run on the synthetic data.
pub fn small_config(data_dir: &Path) -> String {
    format!(
        "dataset_dir = {}\ncomponents = 16\nlr_gmm = 0.05\nlr_classifier = 0.05\nbatch_size = 20\nepochs_first = 6\nepoch_cap = 12\nanneal_steps = 60\ninput_noise = 0.05\nema_warmup = 50\n",
        data_dir.display()
    )
}
