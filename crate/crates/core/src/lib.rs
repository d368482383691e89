//! Gaussian Mixture Replay: a continual learner in which one diagonal Gaussian
//! mixture is the generator, the outlier detector and the feature extractor
//! for a linear softmax classifier. An elastic-weight-consolidation MLP is
//! provided as a baseline, together with an experiment harness.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataio;
pub mod error;
pub mod ewc;
pub mod gmm;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod replay;

pub use classifier::{ClassifierParams, ControlNormalization, ControlSignal};
pub use dataio::{Dataset, SltSpec, SubTaskData};
pub use error::{GmrError, Result};
pub use gmm::{GmmParams, LossStats, ResponsibilityMode};
pub use replay::{GmrModel, GmrSettings, ReplayStrategy};
