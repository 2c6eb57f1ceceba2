//! Label supervision policies: one-hot, fixed label smoothing, and adaptive
//! label smoothing conditioned on robustness subsets.
//!
//! A smoothed target for an example of class `y` puts `p̃ = 1 − ε + ε/Z` on
//! `y` and `ε/Z` on every other class. The adaptive policies keep one `p̃`
//! per robustness subset and, after every epoch, move it against the
//! validation gap of that subset:
//!
//! ```text
//! p̃_r ← clip(p̃_r − α · (conf(S_r^val) − acc(S_r^val)),  1/Z + 1e-9,  1)
//! ε_r ← (p̃_r − 1) · Z / (1 − Z)
//! ```
//!
//! With a single subset this is plain adaptive label smoothing.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::NumArray;
use crate::attack::{self, AttackConfig, RobustnessPartition};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::predictions;
use crate::model::{Checkpoint, Supervisor};

/// Distance kept from the open lower bound `1/Z`.
pub const LOWER_MARGIN: f64 = 1e-9;
pub const DEFAULT_LS_EPSILON: f64 = 0.02;
pub const DEFAULT_ADALS_ALPHA: f64 = 0.05;
pub const DEFAULT_AR_ADALS_ALPHA: f64 = 0.005;
pub const DEFAULT_SUBSETS: usize = 10;

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    Ok(())
}

/// `p̃_correct = 1 − ε + ε/Z` for `ε ∈ [0, 1)`.
pub fn correct_from_epsilon(epsilon: f64, classes: usize) -> Result<f64> {
    check_classes(classes)?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1)")));
    }
    Ok(1.0 - epsilon + epsilon / classes as f64)
}

/// Inverse of [`correct_from_epsilon`]: `ε = (p̃ − 1) · Z / (1 − Z)` for
/// `p̃ ∈ (1/Z, 1]`.
pub fn epsilon_from_correct(correct: f64, classes: usize) -> Result<f64> {
    check_classes(classes)?;
    let z = classes as f64;
    if !(correct > 1.0 / z && correct <= 1.0) {
        return Err(Error::invalid(format!(
            "correct-class mass {correct} outside (1/{classes}, 1]"
        )));
    }
    // + 0.0 turns the -0.0 produced at p̃ = 1 into +0.0
    Ok((correct - 1.0) * z / (1.0 - z) + 0.0)
}

/// `p(1 − ε) + ε/Z` applied to a one-hot (or any probability) vector.
pub fn soften(one_hot: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let z = one_hot.len();
    check_classes(z)?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let uniform = epsilon / z as f64;
    Ok(one_hot.iter().map(|p| p * (1.0 - epsilon) + uniform).collect())
}

/// Per-subset validation accuracy and confidence of the predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetValStats {
    pub confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl SubsetValStats {
    pub fn new(confidence: Vec<f64>, accuracy: Vec<f64>) -> Result<Self> {
        if confidence.len() != accuracy.len() {
            return Err(Error::Shape("confidence/accuracy lengths differ".into()));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !confidence.iter().all(in_unit) || !accuracy.iter().all(in_unit) {
            return Err(Error::invalid("subset statistics must lie in [0, 1]"));
        }
        Ok(SubsetValStats {
            confidence,
            accuracy,
        })
    }

    /// Statistics of `probs` (validation predictions) on each subset of `partition`.
    pub fn from_predictions(
        probs: &NumArray,
        labels: &[usize],
        partition: &RobustnessPartition,
    ) -> Result<Self> {
        if probs.rows() != labels.len() || partition.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions, {} labels, partition of {}",
                probs.rows(),
                labels.len(),
                partition.len()
            )));
        }
        let preds = predictions(probs);
        let mut confidence = Vec::with_capacity(partition.subsets());
        let mut accuracy = Vec::with_capacity(partition.subsets());
        for idx in partition.members() {
            let n = idx.len() as f64;
            let conf: f64 = idx.iter().map(|&i| preds[i].1).sum();
            let hits = idx.iter().filter(|&&i| preds[i].0 == labels[i]).count();
            confidence.push(conf / n);
            accuracy.push(hits as f64 / n);
        }
        Self::new(confidence, accuracy)
    }

    pub fn subsets(&self) -> usize {
        self.confidence.len()
    }
}

/// Per-subset soft-label parameters at epoch `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingState {
    pub subsets: usize,
    pub classes: usize,
    pub alpha: f64,
    /// Correct-class soft label `p̃_r`, always in `(1/Z, 1]`.
    pub correct: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub epoch: usize,
}

impl SmoothingState {
    /// One-hot start: `p̃_r = 1`, `ε_r = 0` for every subset.
    pub fn new(subsets: usize, classes: usize, alpha: f64) -> Result<Self> {
        check_classes(classes)?;
        if subsets == 0 {
            return Err(Error::invalid("need at least one subset"));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {alpha} must be finite and ≥ 0")));
        }
        Ok(SmoothingState {
            subsets,
            classes,
            alpha,
            correct: vec![1.0; subsets],
            epsilon: vec![0.0; subsets],
            epoch: 0,
        })
    }

    pub fn lower_bound(&self) -> f64 {
        1.0 / self.classes as f64 + LOWER_MARGIN
    }

    /// One adaptive step from the validation gaps in `stats`.
    pub fn adaptive_update(&self, stats: &SubsetValStats) -> Result<SmoothingState> {
        if stats.subsets() != self.subsets {
            return Err(Error::Shape(format!(
                "statistics for {} subsets, state has {}",
                stats.subsets(),
                self.subsets
            )));
        }
        let lower = self.lower_bound();
        let mut next = self.clone();
        for r in 0..self.subsets {
            let gap = stats.confidence[r] - stats.accuracy[r];
            let moved = self.correct[r] - self.alpha * gap;
            let clipped = if moved > 1.0 {
                1.0
            } else if moved < lower {
                lower
            } else {
                moved
            };
            next.correct[r] = clipped;
            next.epsilon[r] = epsilon_from_correct(clipped, self.classes)?;
        }
        next.epoch += 1;
        Ok(next)
    }

    /// Full soft-label vector for class `label` in subset `r` (0-based).
    pub fn soft_label(&self, r: usize, label: usize) -> Result<Vec<f64>> {
        if label >= self.classes {
            return Err(Error::invalid(format!(
                "label {label} outside [0, {})",
                self.classes
            )));
        }
        let mut one_hot = vec![0.0; self.classes];
        one_hot[label] = 1.0;
        soften(&one_hot, self.epsilon[r])
    }
}

/// Soft-label matrix for the current state: row `i` is the smoothed one-hot
/// of `labels[i]` using the `ε` of its robustness subset.
pub fn labels_for_epoch(
    state: &SmoothingState,
    partition: &RobustnessPartition,
    labels: &[usize],
) -> Result<NumArray> {
    if partition.len() != labels.len() {
        return Err(Error::Shape(format!(
            "partition covers {} examples, {} labels given",
            partition.len(),
            labels.len()
        )));
    }
    if partition.subsets() != state.subsets {
        return Err(Error::Shape(format!(
            "partition has {} subsets, state has {}",
            partition.subsets(),
            state.subsets
        )));
    }
    let z = state.classes;
    // one row per (subset, class) pair, then copy
    let table: Vec<Vec<Vec<f64>>> = (0..state.subsets)
        .map(|r| (0..z).map(|y| state.soft_label(r, y)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(labels.len() * z);
    for (i, &y) in labels.iter().enumerate() {
        if y >= z {
            return Err(Error::invalid(format!("label {y} outside [0, {z})")));
        }
        data.extend_from_slice(&table[partition.subset_of(i)][y]);
    }
    NumArray::matrix(labels.len(), z, data)
}

/// Supervision with plain one-hot targets.
#[derive(Debug, Clone)]
pub struct OneHot {
    targets: NumArray,
}

impl OneHot {
    pub fn new(train: &Dataset) -> Self {
        OneHot {
            targets: train.one_hot(),
        }
    }
}

impl Supervisor for OneHot {
    fn soft_labels(&mut self, _epoch: usize, _ckpt: &Checkpoint) -> Result<NumArray> {
        Ok(self.targets.clone())
    }
}

/// Label smoothing with one fixed `ε` for every example.
#[derive(Debug, Clone)]
pub struct FixedSmoothing {
    targets: NumArray,
}

impl FixedSmoothing {
    pub fn new(train: &Dataset, epsilon: f64) -> Result<Self> {
        let one_hot = train.one_hot();
        let z = train.classes();
        let mut data = Vec::with_capacity(one_hot.len());
        for i in 0..train.len() {
            data.extend(soften(one_hot.row(i), epsilon)?);
        }
        Ok(FixedSmoothing {
            targets: NumArray::matrix(train.len(), z, data)?,
        })
    }
}

impl Supervisor for FixedSmoothing {
    fn soft_labels(&mut self, _epoch: usize, _ckpt: &Checkpoint) -> Result<NumArray> {
        Ok(self.targets.clone())
    }
}

/// One line of the smoothing trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    /// 1-based subset number.
    pub subset: usize,
    pub correct: f64,
    pub epsilon: f64,
    pub confidence: f64,
    pub accuracy: f64,
}

/// Appends one row per subset describing `state` and the stats that produced it.
pub fn trajectory_rows(state: &SmoothingState, stats: &SubsetValStats) -> Vec<TrajectoryRow> {
    (0..state.subsets)
        .map(|r| TrajectoryRow {
            epoch: state.epoch,
            subset: r + 1,
            correct: state.correct[r],
            epsilon: state.epsilon[r],
            confidence: stats.confidence[r],
            accuracy: stats.accuracy[r],
        })
        .collect()
}

pub fn write_trajectory(rows: &[TrajectoryRow], path: &Path) -> Result<()> {
    let ctx = |e: std::io::Error| Error::io(format!("writing {}", path.display()), e);
    let mut out = String::from("t,r,p_correct,epsilon,conf,acc\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.subset, row.correct, row.epsilon, row.confidence, row.accuracy
        ));
    }
    let mut f = std::fs::File::create(path).map_err(ctx)?;
    f.write_all(out.as_bytes()).map_err(ctx)
}

/// Where the robustness subsets come from during adaptive training.
#[derive(Debug, Clone)]
pub enum PartitionSource {
    /// Fixed subsets computed once (from a one-hot trained model).
    Precomputed {
        train: RobustnessPartition,
        val: RobustnessPartition,
    },
    /// Re-attack the model being trained after every epoch.
    OnTheFly { subsets: usize, attack: AttackConfig },
}

/// Adaptive label smoothing over robustness subsets. With a single subset
/// this is adaptive smoothing without robustness conditioning.
#[derive(Debug, Clone)]
pub struct AdaptiveSmoothing {
    state: SmoothingState,
    train_labels: Vec<usize>,
    train_partition: RobustnessPartition,
    val: Dataset,
    val_partition: RobustnessPartition,
    train_features: Option<NumArray>,
    on_the_fly: Option<AttackConfig>,
    trajectory: Vec<TrajectoryRow>,
    history: Vec<(SmoothingState, SubsetValStats)>,
}

impl AdaptiveSmoothing {
    pub fn new(
        train: &Dataset,
        val: &Dataset,
        train_partition: RobustnessPartition,
        val_partition: RobustnessPartition,
        alpha: f64,
    ) -> Result<Self> {
        if train_partition.len() != train.len() || val_partition.len() != val.len() {
            return Err(Error::Shape(format!(
                "partitions cover {}/{} examples, datasets have {}/{}",
                train_partition.len(),
                val_partition.len(),
                train.len(),
                val.len()
            )));
        }
        if train_partition.subsets() != val_partition.subsets() {
            return Err(Error::invalid("train and validation partitions differ in R"));
        }
        let state = SmoothingState::new(train_partition.subsets(), train.classes(), alpha)?;
        Ok(AdaptiveSmoothing {
            state,
            train_labels: train.labels().to_vec(),
            train_partition,
            val: val.clone(),
            val_partition,
            train_features: None,
            on_the_fly: None,
            trajectory: Vec::new(),
            history: Vec::new(),
        })
    }

    /// Single-subset adaptive smoothing.
    pub fn without_robustness(train: &Dataset, val: &Dataset, alpha: f64) -> Result<Self> {
        Self::new(
            train,
            val,
            RobustnessPartition::single(train.len()),
            RobustnessPartition::single(val.len()),
            alpha,
        )
    }

    /// Subsets recomputed by attacking the model being trained, first from
    /// `initial` and then after every epoch.
    pub fn on_the_fly(
        train: &Dataset,
        val: &Dataset,
        initial: &Checkpoint,
        subsets: usize,
        alpha: f64,
        attack_cfg: &AttackConfig,
    ) -> Result<Self> {
        let (tp, vp) = attack::precompute_partition(initial, train, val, subsets, attack_cfg)?;
        let mut s = Self::new(train, val, tp, vp, alpha)?;
        s.train_features = Some(train.features().clone());
        s.on_the_fly = Some(attack_cfg.clone());
        Ok(s)
    }

    pub fn from_source(train: &Dataset, val: &Dataset, source: PartitionSource, alpha: f64, initial: &Checkpoint) -> Result<Self> {
        match source {
            PartitionSource::Precomputed { train: tp, val: vp } => Self::new(train, val, tp, vp, alpha),
            PartitionSource::OnTheFly { subsets, attack } => {
                Self::on_the_fly(train, val, initial, subsets, alpha, &attack)
            }
        }
    }

    pub fn state(&self) -> &SmoothingState {
        &self.state
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    /// Every `(state before update, stats used)` pair seen so far.
    pub fn history(&self) -> &[(SmoothingState, SubsetValStats)] {
        &self.history
    }

    pub fn train_partition(&self) -> &RobustnessPartition {
        &self.train_partition
    }

    fn refresh_partitions(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let Some(cfg) = &self.on_the_fly else {
            return Ok(());
        };
        let features = self.train_features.as_ref().expect("on-the-fly keeps train features");
        let r = self.state.subsets;
        let train_scores = attack::robustness_scores(ckpt, features, cfg)?;
        self.train_partition = attack::partition(&attack::scores_of(&train_scores), r)?;
        let val_scores = attack::robustness_scores(ckpt, self.val.features(), cfg)?;
        self.val_partition = attack::partition(&attack::scores_of(&val_scores), r)?;
        Ok(())
    }
}

impl Supervisor for AdaptiveSmoothing {
    fn soft_labels(&mut self, _epoch: usize, _ckpt: &Checkpoint) -> Result<NumArray> {
        labels_for_epoch(&self.state, &self.train_partition, &self.train_labels)
    }

    fn end_epoch(&mut self, _epoch: usize, ckpt: &Checkpoint) -> Result<()> {
        self.refresh_partitions(ckpt)?;
        let probs = ckpt.predict_proba(self.val.features())?;
        let stats = SubsetValStats::from_predictions(&probs, self.val.labels(), &self.val_partition)?;
        let next = self.state.adaptive_update(&stats)?;
        self.trajectory.extend(trajectory_rows(&next, &stats));
        self.history.push((self.state.clone(), stats));
        self.state = next;
        Ok(())
    }

    fn smoothing_state(&self) -> Option<&SmoothingState> {
        Some(&self.state)
    }
}

/// The supervision policies the tools can train with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Policy {
    Vanilla,
    LabelSmoothing { epsilon: f64 },
    AdaLs { alpha: f64 },
    ArAdaLs { alpha: f64, subsets: usize },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Vanilla => "vanilla",
            Policy::LabelSmoothing { .. } => "ls",
            Policy::AdaLs { .. } => "adals",
            Policy::ArAdaLs { .. } => "ar_adals",
        }
    }

    pub fn needs_partition(&self) -> bool {
        matches!(self, Policy::ArAdaLs { .. })
    }

    /// Builds a supervisor for `train`. Robustness-conditioned policies need
    /// a partition source.
    pub fn supervisor(
        &self,
        train: &Dataset,
        val: &Dataset,
        source: Option<PartitionSource>,
        initial: &Checkpoint,
    ) -> Result<Box<dyn Supervisor>> {
        Ok(match *self {
            Policy::Vanilla => Box::new(OneHot::new(train)),
            Policy::LabelSmoothing { epsilon } => Box::new(FixedSmoothing::new(train, epsilon)?),
            Policy::AdaLs { alpha } => Box::new(AdaptiveSmoothing::without_robustness(train, val, alpha)?),
            Policy::ArAdaLs { alpha, subsets } => {
                let source = source.ok_or_else(|| {
                    Error::invalid("ar_adals needs precomputed partitions or on-the-fly attacks")
                })?;
                if let PartitionSource::Precomputed { train: tp, .. } = &source {
                    if tp.subsets() != subsets {
                        return Err(Error::invalid(format!(
                            "partition has R = {}, policy asks for {subsets}",
                            tp.subsets()
                        )));
                    }
                }
                Box::new(AdaptiveSmoothing::from_source(train, val, source, alpha, initial)?)
            }
        })
    }
}
