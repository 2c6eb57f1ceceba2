//! Adversarial robustness: the norm of the smallest prediction-flipping
//! perturbation found by an untargeted ℓ2 Carlini–Wagner style attack, and
//! equal-size robustness subsets built from those norms.
//!
//! The attack minimises `‖δ‖₂² + c · max(Z_y₀(x+δ) − max_{z≠y₀} Z_z(x+δ), −κ)`
//! with Adam over `δ`, where `Z` are logits and `y₀` the clean prediction.
//! A binary search over `c` runs for `binary_search_steps` rounds: a round
//! that flips the prediction halves `c` toward the lower bracket, a round that
//! does not multiplies it by `const_growth` (or bisects once an upper bracket
//! exists). The
//! smallest flipping `δ` seen across all rounds is returned.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{argmax, NumArray};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub binary_search_steps: usize,
    pub max_iterations: usize,
    pub step_size: f64,
    pub initial_const: f64,
    /// Factor applied to `c` after a failed round while no flipping `c` is known.
    pub const_growth: f64,
    pub confidence: f64,
    /// Keep `x + δ` inside `[0, 1]` (for image-like inputs).
    pub clamp_unit_box: bool,
    /// Stop a round early once the objective stalls (checked every
    /// `max_iterations / 10` steps).
    pub abort_early: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            binary_search_steps: 3,
            max_iterations: 500,
            step_size: 0.005,
            initial_const: 1.0,
            const_growth: 10.0,
            confidence: 0.0,
            clamp_unit_box: false,
            abort_early: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.binary_search_steps == 0 || self.max_iterations == 0 {
            return Err(Error::invalid("binary_search_steps and max_iterations must be ≥ 1"));
        }
        if !(self.step_size > 0.0 && self.initial_const > 0.0 && self.confidence >= 0.0) {
            return Err(Error::invalid(
                "step_size and initial_const must be positive, confidence non-negative",
            ));
        }
        if !(self.const_growth > 1.0 && self.const_growth.is_finite()) {
            return Err(Error::invalid(
                "const_growth must be a finite factor above 1",
            ));
        }
        Ok(())
    }

    /// Short stable hash of the settings, written into partition files.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Result of attacking one example.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackOutcome {
    /// `delta` flips the prediction.
    Success { delta: NumArray },
    /// No round found a flipping perturbation.
    NoSuccess,
    /// The attack hit non-finite values for this example.
    Failed(String),
}

impl AttackOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, AttackOutcome::Success { .. })
    }

    pub fn delta(&self) -> Option<&NumArray> {
        match self {
            AttackOutcome::Success { delta } => Some(delta),
            _ => None,
        }
    }

    /// `‖δ‖₂`, or `+∞` when no perturbation was found.
    pub fn score(&self) -> f64 {
        match self {
            AttackOutcome::Success { delta } => delta.l2_norm(),
            _ => f64::INFINITY,
        }
    }
}

pub fn scores_of(outcomes: &[AttackOutcome]) -> Vec<f64> {
    outcomes.iter().map(AttackOutcome::score).collect()
}

/// Attacks a single input vector of length `d`.
pub fn cw_l2(ckpt: &Checkpoint, x: &[f64], cfg: &AttackConfig) -> Result<AttackOutcome> {
    let x = NumArray::matrix(1, x.len(), x.to_vec())?;
    let mut out = robustness_scores(ckpt, &x, cfg)?;
    Ok(out.pop().expect("one row in, one outcome out"))
}

const CHUNK_ROWS: usize = 256;

/// Attacks every row of `x`. Rows are independent: each outcome is the same
/// as attacking that row alone, and outcomes come back in input order.
/// Failures stay per example.
pub fn robustness_scores(ckpt: &Checkpoint, x: &NumArray, cfg: &AttackConfig) -> Result<Vec<AttackOutcome>> {
    cfg.validate()?;
    if !x.is_matrix() || x.cols() != ckpt.spec.input_dim() {
        return Err(Error::Shape(format!(
            "attack inputs {:?} for a {}-dim model",
            x.shape(),
            ckpt.spec.input_dim()
        )));
    }
    let mut out = Vec::with_capacity(x.rows());
    let rows: Vec<usize> = (0..x.rows()).collect();
    for chunk in rows.chunks(CHUNK_ROWS) {
        let xb = x.select_rows(chunk);
        match attack_batch(ckpt, &xb, cfg) {
            Ok(res) => out.extend(res),
            Err(_) => {
                for i in 0..xb.rows() {
                    let xi = xb.select_rows(&[i]);
                    match attack_batch(ckpt, &xi, cfg) {
                        Ok(mut r) => out.push(r.pop().expect("one outcome")),
                        Err(e) => out.push(AttackOutcome::Failed(e.to_string())),
                    }
                }
            }
        }
    }
    Ok(out)
}

struct RowState {
    label: usize,
    lower: f64,
    upper: f64,
    c: f64,
    best_norm: f64,
    best: Option<Vec<f64>>,
}

fn attack_batch(ckpt: &Checkpoint, x: &NumArray, cfg: &AttackConfig) -> Result<Vec<AttackOutcome>> {
    let (n, d) = (x.rows(), x.cols());
    let clean = ckpt.logits(x)?;
    let mut rows: Vec<RowState> = (0..n)
        .map(|i| RowState {
            label: argmax(clean.row(i)),
            lower: 0.0,
            upper: f64::INFINITY,
            c: cfg.initial_const,
            best_norm: f64::INFINITY,
            best: None,
        })
        .collect();

    let check_every = (cfg.max_iterations / 10).max(1);
    for _ in 0..cfg.binary_search_steps {
        let mut delta = vec![0.0; n * d];
        let mut adam_m = vec![0.0; n * d];
        let mut adam_v = vec![0.0; n * d];
        let mut prev_loss = vec![f64::INFINITY; n];
        let mut flipped = vec![false; n];
        let mut active: Vec<usize> = (0..n).collect();

        for iter in 1..=cfg.max_iterations {
            if active.is_empty() {
                break;
            }
            let m = active.len();
            let mut xin = Vec::with_capacity(m * d);
            for &i in &active {
                for j in 0..d {
                    xin.push(x.get(i, j) + delta[i * d + j]);
                }
            }
            let mut tape = Tape::new();
            let params: Vec<NodeId> = ckpt.params.iter().map(|p| tape.constant(p.clone())).collect();
            let input = tape.param(NumArray::matrix(m, d, xin)?);
            let logits_id = ckpt.forward_on_tape(&mut tape, &params, input)?;
            let logits = tape.value(logits_id)?;
            let z = logits.cols();

            let mut seed = vec![0.0; m * z];
            let mut loss = vec![0.0; m];
            for (k, &i) in active.iter().enumerate() {
                let row = logits.row(k);
                let st = &mut rows[i];
                let (rival, rival_logit) = row
                    .iter()
                    .enumerate()
                    .filter(|&(c, _)| c != st.label)
                    .fold((usize::MAX, f64::NEG_INFINITY), |acc, (c, &v)| {
                        if v > acc.1 {
                            (c, v)
                        } else {
                            acc
                        }
                    });
                let margin = row[st.label] - rival_logit;
                let dsq: f64 = delta[i * d..(i + 1) * d].iter().map(|v| v * v).sum();
                loss[k] = dsq + st.c * margin.max(-cfg.confidence);
                if margin > -cfg.confidence {
                    seed[k * z + st.label] = st.c;
                    seed[k * z + rival] = -st.c;
                }
                if argmax(row) != st.label {
                    flipped[i] = true;
                    let norm = dsq.sqrt();
                    if norm < st.best_norm && norm > 0.0 {
                        st.best_norm = norm;
                        st.best = Some(delta[i * d..(i + 1) * d].to_vec());
                    }
                }
            }

            let grad = tape
                .vjp(logits_id, NumArray::matrix(m, z, seed)?, &[input])?
                .pop()
                .expect("one gradient");

            let bc1 = 1.0 - 0.9f64.powi(iter as i32);
            let bc2 = 1.0 - 0.999f64.powi(iter as i32);
            for (k, &i) in active.iter().enumerate() {
                for j in 0..d {
                    let p = i * d + j;
                    let g = 2.0 * delta[p] + grad.get(k, j);
                    adam_m[p] = 0.9 * adam_m[p] + 0.1 * g;
                    adam_v[p] = 0.999 * adam_v[p] + 0.001 * g * g;
                    let step = cfg.step_size * (adam_m[p] / bc1) / ((adam_v[p] / bc2).sqrt() + 1e-8);
                    delta[p] -= step;
                    if cfg.clamp_unit_box {
                        let xi = x.get(i, j);
                        delta[p] = (xi + delta[p]).clamp(0.0, 1.0) - xi;
                    }
                }
            }

            if cfg.abort_early && iter % check_every == 0 {
                let mut keep = Vec::with_capacity(m);
                for (k, &i) in active.iter().enumerate() {
                    if loss[k] <= prev_loss[i] * 0.9999 || !loss[k].is_finite() {
                        prev_loss[i] = loss[k];
                        keep.push(i);
                    }
                }
                active = keep;
            }
        }

        for (i, st) in rows.iter_mut().enumerate() {
            if flipped[i] {
                st.upper = st.upper.min(st.c);
                st.c = 0.5 * (st.lower + st.upper);
            } else {
                st.lower = st.lower.max(st.c);
                st.c = if st.upper.is_finite() {
                    0.5 * (st.lower + st.upper)
                } else {
                    cfg.const_growth * st.c
                };
            }
        }
    }

    rows.into_iter()
        .map(|st| match st.best {
            Some(delta) => Ok(AttackOutcome::Success {
                delta: NumArray::vector(delta)?,
            }),
            None => Ok(AttackOutcome::NoSuccess),
        })
        .collect()
}

/// Per-example robustness score and 0-based subset index `r`, with subset 0
/// the least robust.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessPartition {
    scores: Vec<f64>,
    subset: Vec<usize>,
    subsets: usize,
}

impl RobustnessPartition {
    /// Every example in one subset (no robustness conditioning).
    pub fn single(n: usize) -> Self {
        RobustnessPartition {
            scores: vec![0.0; n],
            subset: vec![0; n],
            subsets: 1,
        }
    }

    /// Wraps an explicit 0-based assignment; scores are set to the subset index.
    pub fn from_assignment(subset: Vec<usize>, subsets: usize) -> Result<Self> {
        if subsets == 0 || subset.iter().any(|&r| r >= subsets) {
            return Err(Error::invalid("subset index out of range"));
        }
        let scores = subset.iter().map(|&r| r as f64).collect();
        Ok(RobustnessPartition {
            scores,
            subset,
            subsets,
        })
    }

    pub fn len(&self) -> usize {
        self.subset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset.is_empty()
    }

    pub fn subsets(&self) -> usize {
        self.subsets
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn assignment(&self) -> &[usize] {
        &self.subset
    }

    /// 0-based subset of example `i`.
    pub fn subset_of(&self, i: usize) -> usize {
        self.subset[i]
    }

    /// Example indices of each subset, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.subsets];
        for (i, &r) in self.subset.iter().enumerate() {
            out[r].push(i);
        }
        out
    }
}

/// Sorts examples by `(score, index)` and cuts them into `subsets`
/// contiguous blocks whose sizes differ by at most one.
pub fn partition(scores: &[f64], subsets: usize) -> Result<RobustnessPartition> {
    let n = scores.len();
    if subsets == 0 {
        return Err(Error::invalid("R must be at least 1"));
    }
    if subsets > n {
        return Err(Error::invalid(format!("R = {subsets} exceeds {n} examples")));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan() || **s < 0.0) {
        return Err(Error::invalid(format!("robustness score {bad} is not a non-negative number")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut subset = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        subset[i] = pos * subsets / n;
    }
    Ok(RobustnessPartition {
        scores: scores.to_vec(),
        subset,
        subsets,
    })
}

/// Attacks a one-hot trained model once on train and validation data and
/// partitions both.
pub fn precompute_partition(
    vanilla: &Checkpoint,
    train: &Dataset,
    val: &Dataset,
    subsets: usize,
    cfg: &AttackConfig,
) -> Result<(RobustnessPartition, RobustnessPartition)> {
    for (ds, name) in [(train, "train"), (val, "validation")] {
        if ds.dim() != vanilla.spec.input_dim() || ds.classes() != vanilla.spec.classes() {
            return Err(Error::Shape(format!(
                "{name} set is {}-dim with {} classes; checkpoint is {:?}",
                ds.dim(),
                ds.classes(),
                vanilla.spec.layer_sizes
            )));
        }
    }
    let t = scores_of(&robustness_scores(vanilla, train.features(), cfg)?);
    let v = scores_of(&robustness_scores(vanilla, val.features(), cfg)?);
    Ok((partition(&t, subsets)?, partition(&v, subsets)?))
}

/// Provenance written at the top of a partition file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionHeader {
    pub subsets: usize,
    pub attack_config_hash: String,
    pub checkpoint_hash: String,
    /// Hash of the experiment config that produced the file; empty if none.
    pub config_hash: String,
}

/// Partition file layout:
///
/// ```text
/// # calibrar robustness partition v1
/// # R=10
/// # attack_config_hash=…
/// # checkpoint_hash=…
/// # config_hash=…          (optional)
/// example_id,score,subset_index
/// 0,0.4182…,3
/// ```
///
/// `subset_index` is 1-based; scores of examples no attack could flip are `inf`.
pub fn write_partition(
    path: &Path,
    p: &RobustnessPartition,
    attack_hash: &str,
    checkpoint_hash: &str,
    config_hash: &str,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# calibrar robustness partition v1");
    let _ = writeln!(out, "# R={}", p.subsets);
    let _ = writeln!(out, "# attack_config_hash={attack_hash}");
    let _ = writeln!(out, "# checkpoint_hash={checkpoint_hash}");
    if !config_hash.is_empty() {
        let _ = writeln!(out, "# config_hash={config_hash}");
    }
    out.push_str("example_id,score,subset_index\n");
    for (i, (&s, &r)) in p.scores.iter().zip(&p.subset).enumerate() {
        let _ = writeln!(out, "{i},{s},{}", r + 1);
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_partition(path: &Path) -> Result<(PartitionHeader, RobustnessPartition)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut subsets = None;
    let mut attack_config_hash = String::new();
    let mut checkpoint_hash = String::new();
    let mut config_hash = String::new();
    let mut scores = Vec::new();
    let mut assign = Vec::new();
    let mut saw_columns = false;
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if let Some(meta) = line.strip_prefix("# ") {
            if let Some(v) = meta.strip_prefix("R=") {
                subsets = Some(v.parse::<usize>().map_err(|_| err(lineno, "bad R"))?);
            } else if let Some(v) = meta.strip_prefix("attack_config_hash=") {
                attack_config_hash = v.to_string();
            } else if let Some(v) = meta.strip_prefix("checkpoint_hash=") {
                checkpoint_hash = v.to_string();
            } else if let Some(v) = meta.strip_prefix("config_hash=") {
                config_hash = v.to_string();
            }
            continue;
        }
        if !saw_columns {
            if line.trim() != "example_id,score,subset_index" {
                return Err(err(lineno, "expected column header"));
            }
            saw_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(lineno, "expected 3 fields"));
        }
        let id: usize = fields[0].parse().map_err(|_| err(lineno, "bad example_id"))?;
        if id != scores.len() {
            return Err(err(lineno, "example ids must be 0, 1, 2, …"));
        }
        let s: f64 = fields[1].parse().map_err(|_| err(lineno, "bad score"))?;
        let r: usize = fields[2].parse().map_err(|_| err(lineno, "bad subset_index"))?;
        if r == 0 {
            return Err(err(lineno, "subset_index is 1-based"));
        }
        scores.push(s);
        assign.push(r - 1);
    }
    let subsets = subsets.ok_or_else(|| err(1, "missing R header"))?;
    if assign.iter().any(|&r| r >= subsets) {
        return Err(Error::Format(format!("{}: subset index exceeds R", path.display())));
    }
    Ok((
        PartitionHeader {
            subsets,
            attack_config_hash,
            checkpoint_hash,
            config_hash,
        },
        RobustnessPartition {
            scores,
            subset: assign,
            subsets,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpSpec;

    #[test]
    fn hand_sorted_partition() {
        let p = partition(&[3.0, 1.0, 2.0], 3).unwrap();
        let numbers: Vec<usize> = (0..3).map(|i| p.subset_of(i) + 1).collect();
        assert_eq!(numbers, vec![3, 1, 2]);
    }

    #[test]
    fn single_subset_and_one_per_subset() {
        let scores: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64).collect();
        let p = partition(&scores, 1).unwrap();
        assert!(p.assignment().iter().all(|&r| r == 0));
        let p = partition(&scores, 10).unwrap();
        for i in 0..10 {
            assert_eq!(p.subset_of(i), scores[i] as usize);
        }
        assert!(partition(&scores, 11).is_err());
        assert!(partition(&scores, 0).is_err());
    }

    #[test]
    fn sizes_differ_by_at_most_one() {
        let scores: Vec<f64> = (0..23).map(|i| (i as f64).sin().abs()).collect();
        let p = partition(&scores, 5).unwrap();
        let sizes: Vec<usize> = p.members().iter().map(Vec::len).collect();
        assert!(sizes.iter().all(|&s| s == 4 || s == 5), "{sizes:?}");
    }

    #[test]
    fn infinite_scores_rank_last() {
        let p = partition(&[f64::INFINITY, 0.2, 0.1, 0.3], 2).unwrap();
        assert_eq!(p.subset_of(0), 1);
        assert_eq!(p.subset_of(2), 0);
    }

    #[test]
    fn partition_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = partition(&[0.5, f64::INFINITY, 0.25, 1.0 / 3.0], 2).unwrap();
        write_partition(&path, &p, "abc", "def", "").unwrap();
        let (h, back) = read_partition(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(h.subsets, 2);
        assert_eq!(h.attack_config_hash, "abc");
        assert_eq!(h.checkpoint_hash, "def");
    }

    #[test]
    fn linear_model_attack_reaches_the_boundary() {
        // two-class linear model: logits = x·W, boundary x0 = x1
        let mut ck = crate::model::init(&MlpSpec::new(2, &[], 2, 0)).unwrap();
        ck.params[0] = NumArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = [1.0, 0.0];
        let out = cw_l2(&ck, &x, &AttackConfig::default()).unwrap();
        let delta = out.delta().expect("attack succeeds");
        let adv = [x[0] + delta.data()[0], x[1] + delta.data()[1]];
        assert!(adv[1] >= adv[0]);
        // closed form distance |x0 - x1| / √2
        let exact = 1.0 / 2f64.sqrt();
        assert!(delta.l2_norm() >= exact - 1e-12);
        assert!(delta.l2_norm() < exact * 1.05, "{}", delta.l2_norm());
    }

    #[test]
    fn rows_are_independent() {
        let ck = crate::model::init(&MlpSpec::new(3, &[6], 3, 4)).unwrap();
        let x = NumArray::matrix(3, 3, vec![0.2, -0.1, 0.4, 1.0, 0.3, -0.7, 0.2, -0.1, 0.4]).unwrap();
        let cfg = AttackConfig {
            max_iterations: 60,
            ..AttackConfig::default()
        };
        let batch = robustness_scores(&ck, &x, &cfg).unwrap();
        for i in 0..3 {
            let alone = cw_l2(&ck, x.row(i), &cfg).unwrap();
            assert_eq!(alone, batch[i]);
        }
        assert_eq!(batch[0], batch[2]);
    }

    #[test]
    fn config_validation() {
        let cfg = AttackConfig {
            binary_search_steps: 0,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(AttackConfig::default().hash(), AttackConfig::default().hash());
    }
}
