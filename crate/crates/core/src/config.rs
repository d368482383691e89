//! Experiment configuration: `key = value` lines, `#` comments and
//! `include <path>` directives, with environment overrides.
//!
//! Any key can be overridden through an environment variable named
//! `GMR_<KEY>` in upper case, e.g. `GMR_LR_GMM=0.005`. Overrides apply after
//! all files are read.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::classifier::ControlNormalization;
use crate::error::{GmrError, Result};
use crate::ewc::EwcSettings;
use crate::gmm::{Annealing, GmmInit, ResponsibilityMode, UpdateRule};
use crate::replay::{DetectorSettings, GmrSettings, PseudoLabels, ReplayStrategy};

pub const ENV_PREFIX: &str = "GMR_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gmr,
    Ewc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Proportional,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub dataset: String,
    /// Keep only this many classes, drawn with `class_seed`.
    pub class_count: Option<usize>,
    pub class_seed: u64,
    pub split_seed: u64,
    pub max_train_samples: Option<usize>,
    pub slt: String,
    pub model: ModelKind,

    pub components: usize,
    pub lr_gmm: f64,
    pub lr_classifier: f64,
    pub batch_size: usize,
    pub kappa: f64,
    pub outlier_c: f64,
    pub confidence: f64,
    pub control: ControlNormalization,
    pub sigma_min: f64,
    pub ema_alpha: f64,
    pub ema_warmup: usize,
    pub strategy: StrategyKind,
    pub epochs_first: usize,
    pub epoch_cap: usize,
    pub max_attempts_factor: f64,
    pub responsibility: ResponsibilityMode,
    pub pseudo_labels: PseudoLabels,
    pub update_rule: UpdateRule,
    pub init_low: f64,
    pub init_high: f64,
    pub init_std: f64,
    pub init_from_data: bool,
    pub input_noise: f64,
    pub anneal_steps: usize,
    pub anneal_start: f64,
    pub anneal_end: f64,
    pub detector_window: usize,
    pub detector_stride: usize,
    pub detector_drop: f64,
    pub detector_warmup: usize,
    pub detector_reference: usize,

    pub ewc_grid: Vec<f64>,
    pub ewc_epochs: usize,
    pub ewc_hidden: Vec<usize>,
    pub ewc_batch_size: usize,
    pub ewc_precision: Precision,

    pub repetitions: usize,
    pub seed: u64,
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gmr = GmrSettings::default();
        let ewc = EwcSettings::default();
        let annealing = gmr.annealing.unwrap_or(Annealing { start: 0.0, end: 0.0, steps: 0 });
        Self {
            dataset_dir: PathBuf::from("data/mnist"),
            dataset: "mnist".into(),
            class_count: None,
            class_seed: 0,
            split_seed: 0,
            max_train_samples: None,
            slt: "D10".into(),
            model: ModelKind::Gmr,
            components: gmr.components,
            lr_gmm: gmr.lr_gmm,
            lr_classifier: gmr.lr_classifier,
            batch_size: gmr.batch_size,
            kappa: 2.0,
            outlier_c: gmr.outlier_c,
            confidence: gmr.confidence,
            control: gmr.control,
            sigma_min: gmr.sigma_min,
            ema_alpha: gmr.ema_alpha,
            ema_warmup: gmr.ema_warmup,
            strategy: StrategyKind::Proportional,
            epochs_first: gmr.epochs_first,
            epoch_cap: gmr.epoch_cap,
            max_attempts_factor: gmr.max_attempts_factor,
            responsibility: gmr.responsibility_mode,
            pseudo_labels: gmr.pseudo_labels,
            update_rule: gmr.update_rule,
            init_low: gmr.init.centroid_low,
            init_high: gmr.init.centroid_high,
            init_std: gmr.init.std_dev,
            init_from_data: gmr.init_from_data,
            input_noise: gmr.input_noise,
            anneal_steps: annealing.steps,
            anneal_start: annealing.start,
            anneal_end: annealing.end,
            detector_window: gmr.detector.window,
            detector_stride: gmr.detector.stride,
            detector_drop: gmr.detector.drop_threshold,
            detector_warmup: gmr.detector.warmup,
            detector_reference: gmr.detector.reference_windows,
            ewc_grid: vec![1e-3, 1e-4, 1e-5, 1e-6, 1e-7],
            ewc_epochs: ewc.epochs,
            ewc_hidden: ewc.hidden,
            ewc_batch_size: ewc.batch_size,
            ewc_precision: Precision::F32,
            repetitions: 1,
            seed: 0,
            checkpoints: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| GmrError::Config { location: key.into(), message: format!("cannot parse '{value}'") })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(GmrError::Config { location: key.into(), message: format!("expected a boolean, got '{value}'") }),
    }
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    if value.eq_ignore_ascii_case("none") || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn bad_choice(key: &str, value: &str, choices: &str) -> GmrError {
    GmrError::Config { location: key.into(), message: format!("'{value}' is not one of {choices}") }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "none".into(), |n| n.to_string())
}

impl ExperimentConfig {
    /// Assigns one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset_dir" => self.dataset_dir = PathBuf::from(v),
            "dataset" => self.dataset = v.to_string(),
            "class_count" => self.class_count = parse_optional(key, v)?,
            "class_seed" => self.class_seed = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "max_train_samples" => self.max_train_samples = parse_optional(key, v)?,
            "slt" => self.slt = v.to_string(),
            "model" => {
                self.model = match v.to_ascii_lowercase().as_str() {
                    "gmr" => ModelKind::Gmr,
                    "ewc" => ModelKind::Ewc,
                    _ => return Err(bad_choice(key, v, "gmr, ewc")),
                }
            }
            "components" => self.components = parse(key, v)?,
            "lr_gmm" => self.lr_gmm = parse(key, v)?,
            "lr_classifier" => self.lr_classifier = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "kappa" => self.kappa = parse(key, v)?,
            "outlier_c" => self.outlier_c = parse(key, v)?,
            "confidence" => self.confidence = parse(key, v)?,
            "sigma_min" => self.sigma_min = parse(key, v)?,
            "ema_alpha" => self.ema_alpha = parse(key, v)?,
            "ema_warmup" => self.ema_warmup = parse(key, v)?,
            "strategy" => {
                self.strategy = match v.to_ascii_lowercase().as_str() {
                    "proportional" => StrategyKind::Proportional,
                    "constant" => StrategyKind::Constant,
                    _ => return Err(bad_choice(key, v, "proportional, constant")),
                }
            }
            "epochs_first" => self.epochs_first = parse(key, v)?,
            "epoch_cap" => self.epoch_cap = parse(key, v)?,
            "max_attempts_factor" => self.max_attempts_factor = parse(key, v)?,
            "responsibility" => {
                self.responsibility = match v.to_ascii_lowercase().as_str() {
                    "unweighted" => ResponsibilityMode::Unweighted,
                    "weighted" => ResponsibilityMode::Weighted,
                    _ => return Err(bad_choice(key, v, "unweighted, weighted")),
                }
            }
            "pseudo_labels" => {
                self.pseudo_labels = match v.to_ascii_lowercase().as_str() {
                    "predicted" => PseudoLabels::Predicted,
                    "conditional" => PseudoLabels::Conditional,
                    _ => return Err(bad_choice(key, v, "predicted, conditional")),
                }
            }
            "control" => {
                self.control = match v.to_ascii_lowercase().as_str() {
                    "softmax" => ControlNormalization::Softmax,
                    "shift" => ControlNormalization::Shift,
                    _ => return Err(bad_choice(key, v, "softmax, shift")),
                }
            }
            "update_rule" => {
                self.update_rule = match v.to_ascii_lowercase().as_str() {
                    "plain" => UpdateRule::Plain,
                    "natural" => UpdateRule::Natural,
                    _ => return Err(bad_choice(key, v, "plain, natural")),
                }
            }
            "init_low" => self.init_low = parse(key, v)?,
            "init_high" => self.init_high = parse(key, v)?,
            "init_std" => self.init_std = parse(key, v)?,
            "init_from_data" => self.init_from_data = parse_bool(key, v)?,
            "input_noise" => self.input_noise = parse(key, v)?,
            "anneal_steps" => self.anneal_steps = parse(key, v)?,
            "anneal_start" => self.anneal_start = parse(key, v)?,
            "anneal_end" => self.anneal_end = parse(key, v)?,
            "detector_window" => self.detector_window = parse(key, v)?,
            "detector_stride" => self.detector_stride = parse(key, v)?,
            "detector_drop" => self.detector_drop = parse(key, v)?,
            "detector_warmup" => self.detector_warmup = parse(key, v)?,
            "detector_reference" => self.detector_reference = parse(key, v)?,
            "ewc_grid" => self.ewc_grid = parse_list(key, v)?,
            "ewc_epochs" => self.ewc_epochs = parse(key, v)?,
            "ewc_hidden" => self.ewc_hidden = parse_list(key, v)?,
            "ewc_batch_size" => self.ewc_batch_size = parse(key, v)?,
            "ewc_precision" => {
                self.ewc_precision = match v.to_ascii_lowercase().as_str() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad_choice(key, v, "f32, f64")),
                }
            }
            "repetitions" => self.repetitions = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoints" => self.checkpoints = parse_bool(key, v)?,
            _ => return Err(GmrError::Config { location: key.into(), message: "unknown key".into() }),
        }
        Ok(())
    }

    /// Canonical `key = value` dump; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let lower = |s: String| s.to_ascii_lowercase();
        let pairs: Vec<(&str, String)> = vec![
            ("dataset_dir", self.dataset_dir.display().to_string()),
            ("dataset", self.dataset.clone()),
            ("class_count", opt(self.class_count)),
            ("class_seed", self.class_seed.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("max_train_samples", opt(self.max_train_samples)),
            ("slt", self.slt.clone()),
            ("model", lower(format!("{:?}", self.model))),
            ("components", self.components.to_string()),
            ("lr_gmm", self.lr_gmm.to_string()),
            ("lr_classifier", self.lr_classifier.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("kappa", self.kappa.to_string()),
            ("outlier_c", self.outlier_c.to_string()),
            ("confidence", self.confidence.to_string()),
            ("control", lower(format!("{:?}", self.control))),
            ("sigma_min", self.sigma_min.to_string()),
            ("ema_alpha", self.ema_alpha.to_string()),
            ("ema_warmup", self.ema_warmup.to_string()),
            ("strategy", lower(format!("{:?}", self.strategy))),
            ("epochs_first", self.epochs_first.to_string()),
            ("epoch_cap", self.epoch_cap.to_string()),
            ("max_attempts_factor", self.max_attempts_factor.to_string()),
            ("responsibility", lower(format!("{:?}", self.responsibility))),
            ("pseudo_labels", lower(format!("{:?}", self.pseudo_labels))),
            ("update_rule", lower(format!("{:?}", self.update_rule))),
            ("init_low", self.init_low.to_string()),
            ("init_high", self.init_high.to_string()),
            ("init_std", self.init_std.to_string()),
            ("init_from_data", self.init_from_data.to_string()),
            ("input_noise", self.input_noise.to_string()),
            ("anneal_steps", self.anneal_steps.to_string()),
            ("anneal_start", self.anneal_start.to_string()),
            ("anneal_end", self.anneal_end.to_string()),
            ("detector_window", self.detector_window.to_string()),
            ("detector_stride", self.detector_stride.to_string()),
            ("detector_drop", self.detector_drop.to_string()),
            ("detector_warmup", self.detector_warmup.to_string()),
            ("detector_reference", self.detector_reference.to_string()),
            ("ewc_grid", join(&self.ewc_grid)),
            ("ewc_epochs", self.ewc_epochs.to_string()),
            ("ewc_hidden", join(&self.ewc_hidden)),
            ("ewc_batch_size", self.ewc_batch_size.to_string()),
            ("ewc_precision", lower(format!("{:?}", self.ewc_precision))),
            ("repetitions", self.repetitions.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoints", self.checkpoints.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical dump.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `text` on top of `self`. Includes resolve relative to `base`.
    pub fn apply_text(&mut self, text: &str, origin: &str, base: &Path, depth: usize) -> Result<()> {
        if depth > 16 {
            return Err(GmrError::Config { location: origin.into(), message: "include nesting too deep".into() });
        }
        for (n, raw) in text.lines().enumerate() {
            let location = format!("{origin}:{}", n + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include") {
                let target = rest.trim().trim_start_matches('=').trim();
                if target.is_empty() {
                    return Err(GmrError::Config { location, message: "include without a path".into() });
                }
                let path = base.join(target);
                let inner = std::fs::read_to_string(&path)
                    .map_err(|e| GmrError::Config { location: location.clone(), message: format!("{}: {e}", path.display()) })?;
                let inner_base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                self.apply_text(&inner, &path.display().to_string(), &inner_base, depth + 1)?;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GmrError::Config { location: location.clone(), message: format!("expected key = value, got '{line}'") })?;
            self.set(key.trim(), value).map_err(|e| match e {
                GmrError::Config { message, .. } => GmrError::Config { location, message: format!("{}: {message}", key.trim()) },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GmrError::Config { location: path.display().to_string(), message: e.to_string() })?;
        let mut cfg = Self::default();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.apply_text(&text, &path.display().to_string(), &base, 0)?;
        Ok(cfg)
    }

    /// Applies `GMR_*` overrides from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let sorted: BTreeMap<String, String> = vars.into_iter().collect();
        for (name, value) in sorted {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                self.set(&key.to_ascii_lowercase(), &value).map_err(|e| match e {
                    GmrError::Config { message, .. } => GmrError::Config { location: name.clone(), message },
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    pub fn gmr_settings(&self) -> GmrSettings {
        GmrSettings {
            components: self.components,
            lr_gmm: self.lr_gmm,
            lr_classifier: self.lr_classifier,
            batch_size: self.batch_size,
            sigma_min: self.sigma_min,
            ema_alpha: self.ema_alpha,
            ema_warmup: self.ema_warmup,
            outlier_c: self.outlier_c,
            strategy: match self.strategy {
                StrategyKind::Proportional => ReplayStrategy::Proportional,
                StrategyKind::Constant => ReplayStrategy::Constant { kappa: self.kappa },
            },
            epochs_first: self.epochs_first,
            epoch_cap: self.epoch_cap,
            max_attempts_factor: self.max_attempts_factor,
            responsibility_mode: self.responsibility,
            pseudo_labels: self.pseudo_labels,
            confidence: self.confidence,
            control: self.control,
            init: GmmInit { centroid_low: self.init_low, centroid_high: self.init_high, std_dev: self.init_std },
            init_from_data: self.init_from_data,
            input_noise: self.input_noise,
            update_rule: self.update_rule,
            annealing: (self.anneal_steps > 0).then_some(Annealing {
                start: self.anneal_start,
                end: self.anneal_end,
                steps: self.anneal_steps,
            }),
            detector: DetectorSettings {
                window: self.detector_window,
                stride: self.detector_stride,
                drop_threshold: self.detector_drop,
                warmup: self.detector_warmup,
                reference_windows: self.detector_reference,
            },
        }
    }

    pub fn ewc_settings(&self, lr: f64) -> EwcSettings {
        EwcSettings { hidden: self.ewc_hidden.clone(), lr, lambda: None, epochs: self.ewc_epochs, batch_size: self.ewc_batch_size }
    }
}
