//! Adversarial-robustness-conditioned adaptive label smoothing for small
//! MLP classifiers, with calibration and stability metrics, corrupted-data
//! evaluation and deep ensembles.

pub mod array;
pub mod attack;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod smoothing;
pub mod tape;

pub use array::{argmax, NumArray};
pub use attack::{
    cw_l2, partition, precompute_partition, robustness_scores, AttackConfig, AttackOutcome, RobustnessPartition,
};
pub use data::{corrupt, split, synth, Corruption, Dataset};
pub use ensemble::{predict_ensemble, train_ensemble, EnsembleMode, EnsembleRun, EnsembleSetup};
pub use error::{Error, Result};
pub use metrics::{ece, variance, CalibrationReport, StabilityReport};
pub use model::{init, train, Checkpoint, MlpSpec, TrainConfig, Trainer};
pub use smoothing::{AdaptiveSmoothing, PartitionSource, Policy, SmoothingState};
pub use tape::{NodeId, Tape};
