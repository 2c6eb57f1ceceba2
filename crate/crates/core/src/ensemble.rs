//! Deep ensembles under any supervision policy.
//!
//! `EnsembleOf*` modes train M independent members, each with its own
//! smoothing state fed by its own validation predictions. In
//! `AradalsOfEnsemble` the members advance in lockstep: after every epoch
//! the validation predictions of all members are averaged, one shared state
//! is updated from the averaged statistics, and every member trains on the
//! same soft labels in the next epoch. Each member keeps its own seeded
//! minibatch order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::NumArray;
use crate::attack::RobustnessPartition;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, Checkpoint, MlpSpec, TrainConfig, Trainer};
use crate::smoothing::{
    labels_for_epoch, trajectory_rows, write_trajectory, AdaptiveSmoothing, PartitionSource, Policy,
    SmoothingState, SubsetValStats, TrajectoryRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    EnsembleOfVanilla,
    EnsembleOfLs,
    EnsembleOfAdals,
    EnsembleOfAradals,
    AradalsOfEnsemble,
}

impl EnsembleMode {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleMode::EnsembleOfVanilla => "ensemble_of_vanilla",
            EnsembleMode::EnsembleOfLs => "ensemble_of_ls",
            EnsembleMode::EnsembleOfAdals => "ensemble_of_adals",
            EnsembleMode::EnsembleOfAradals => "ensemble_of_aradals",
            EnsembleMode::AradalsOfEnsemble => "aradals_of_ensemble",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            EnsembleMode::EnsembleOfVanilla,
            EnsembleMode::EnsembleOfLs,
            EnsembleMode::EnsembleOfAdals,
            EnsembleMode::EnsembleOfAradals,
            EnsembleMode::AradalsOfEnsemble,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown ensemble mode {s:?}")))
    }

    fn accepts(self, policy: &Policy) -> bool {
        matches!(
            (self, policy),
            (EnsembleMode::EnsembleOfVanilla, Policy::Vanilla)
                | (EnsembleMode::EnsembleOfLs, Policy::LabelSmoothing { .. })
                | (EnsembleMode::EnsembleOfAdals, Policy::AdaLs { .. })
                | (EnsembleMode::EnsembleOfAradals, Policy::ArAdaLs { .. })
                | (EnsembleMode::AradalsOfEnsemble, Policy::ArAdaLs { .. })
                | (EnsembleMode::AradalsOfEnsemble, Policy::AdaLs { .. })
        )
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub mode: EnsembleMode,
    pub policy: Policy,
    pub seeds: Vec<u64>,
    pub members: Vec<Checkpoint>,
    /// Shared-state trajectory (lockstep mode) or one per member.
    pub trajectories: Vec<Vec<TrajectoryRow>>,
}

/// Everything members share: architecture (its seed is replaced per member),
/// data splits, policy and training settings.
#[derive(Debug, Clone)]
pub struct EnsembleSetup<'a> {
    pub spec: MlpSpec,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub policy: Policy,
    pub cfg: TrainConfig,
    /// Train/validation robustness partitions; required by robustness-conditioned policies.
    pub partitions: Option<(RobustnessPartition, RobustnessPartition)>,
}

impl EnsembleSetup<'_> {
    fn member(&self, seed: u64) -> (MlpSpec, TrainConfig) {
        let mut spec = self.spec.clone();
        spec.seed = seed;
        let cfg = TrainConfig {
            seed,
            ..self.cfg.clone()
        };
        (spec, cfg)
    }

    fn partitions_for(&self, subsets: Option<usize>) -> Result<(RobustnessPartition, RobustnessPartition)> {
        match subsets {
            None => Ok((
                RobustnessPartition::single(self.train.len()),
                RobustnessPartition::single(self.val.len()),
            )),
            Some(r) => {
                let (t, v) = self
                    .partitions
                    .clone()
                    .ok_or_else(|| Error::invalid("robustness partitions required for ar_adals"))?;
                if t.subsets() != r {
                    return Err(Error::invalid(format!(
                        "partition has R = {}, policy asks for {r}",
                        t.subsets()
                    )));
                }
                Ok((t, v))
            }
        }
    }
}

pub fn train_ensemble(setup: &EnsembleSetup<'_>, seeds: &[u64], mode: EnsembleMode) -> Result<EnsembleRun> {
    if seeds.is_empty() {
        return Err(Error::invalid("an ensemble needs at least one member"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate member seeds in {seeds:?}")));
    }
    if !mode.accepts(&setup.policy) {
        return Err(Error::invalid(format!(
            "mode {} cannot train policy {}",
            mode.name(),
            setup.policy.name()
        )));
    }
    match mode {
        EnsembleMode::AradalsOfEnsemble => train_lockstep(setup, seeds),
        _ => train_independent(setup, seeds, mode),
    }
}

fn train_independent(setup: &EnsembleSetup<'_>, seeds: &[u64], mode: EnsembleMode) -> Result<EnsembleRun> {
    let mut members = Vec::with_capacity(seeds.len());
    let mut trajectories = Vec::new();
    for &seed in seeds {
        let (spec, cfg) = setup.member(seed);
        let init = model::init(&spec)?;
        let ckpt = match setup.policy {
            Policy::AdaLs { alpha } | Policy::ArAdaLs { alpha, .. } => {
                let subsets = match setup.policy {
                    Policy::ArAdaLs { subsets, .. } => Some(subsets),
                    _ => None,
                };
                let (tp, vp) = setup.partitions_for(subsets)?;
                let mut sup = AdaptiveSmoothing::from_source(
                    setup.train,
                    setup.val,
                    PartitionSource::Precomputed { train: tp, val: vp },
                    alpha,
                    &init,
                )?;
                let ckpt = model::train(init, setup.train, &mut sup, &cfg, |_, _| Ok(()))?;
                trajectories.push(sup.trajectory().to_vec());
                ckpt
            }
            _ => {
                let mut sup = setup.policy.supervisor(setup.train, setup.val, None, &init)?;
                model::train(init, setup.train, sup.as_mut(), &cfg, |_, _| Ok(()))?
            }
        };
        members.push(ckpt);
    }
    Ok(EnsembleRun {
        mode,
        policy: setup.policy,
        seeds: seeds.to_vec(),
        members,
        trajectories,
    })
}

fn train_lockstep(setup: &EnsembleSetup<'_>, seeds: &[u64]) -> Result<EnsembleRun> {
    let (alpha, subsets) = match setup.policy {
        Policy::ArAdaLs { alpha, subsets } => (alpha, Some(subsets)),
        Policy::AdaLs { alpha } => (alpha, None),
        _ => unreachable!("checked by EnsembleMode::accepts"),
    };
    let (train_part, val_part) = setup.partitions_for(subsets)?;
    let mut state = SmoothingState::new(train_part.subsets(), setup.train.classes(), alpha)?;
    let mut trainers = seeds
        .iter()
        .map(|&seed| {
            let (spec, cfg) = setup.member(seed);
            Trainer::new(model::init(&spec)?, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trajectory = Vec::new();
    for _ in 0..setup.cfg.epochs {
        let targets = labels_for_epoch(&state, &train_part, setup.train.labels())?;
        for t in trainers.iter_mut() {
            t.run_epoch(setup.train.features(), &targets)?;
        }
        let val_probs = trainers
            .iter()
            .map(|t| t.checkpoint().predict_proba(setup.val.features()))
            .collect::<Result<Vec<_>>>()?;
        let mean = mean_probs(&val_probs)?;
        let stats = SubsetValStats::from_predictions(&mean, setup.val.labels(), &val_part)?;
        state = state.adaptive_update(&stats)?;
        trajectory.extend(trajectory_rows(&state, &stats));
        for t in trainers.iter_mut() {
            t.set_smoothing(Some(state.clone()));
        }
    }
    Ok(EnsembleRun {
        mode: EnsembleMode::AradalsOfEnsemble,
        policy: setup.policy,
        seeds: seeds.to_vec(),
        members: trainers.into_iter().map(Trainer::into_checkpoint).collect(),
        trajectories: vec![trajectory],
    })
}

/// Arithmetic mean of equally shaped probability matrices.
pub fn mean_probs(per_model: &[NumArray]) -> Result<NumArray> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::invalid("no member predictions to average"))?;
    let mut acc = NumArray::zeros(first.shape());
    for p in per_model {
        if p.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "member outputs {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
        acc.accumulate(p);
    }
    Ok(acc.scale(1.0 / per_model.len() as f64))
}

pub fn predict_members(members: &[Checkpoint], x: &NumArray) -> Result<Vec<NumArray>> {
    members.iter().map(|m| m.predict_proba(x)).collect()
}

/// Averaged member probabilities for `x`.
pub fn predict_ensemble(members: &[Checkpoint], x: &NumArray) -> Result<NumArray> {
    if members.is_empty() {
        return Err(Error::invalid("empty ensemble"));
    }
    for m in members {
        if m.spec.layer_sizes.first() != members[0].spec.layer_sizes.first()
            || m.spec.classes() != members[0].spec.classes()
        {
            return Err(Error::Shape("ensemble members disagree on input or class count".into()));
        }
    }
    mean_probs(&predict_members(members, x)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub mode: EnsembleMode,
    pub members: usize,
    pub seeds: Vec<u64>,
    pub policy: Policy,
    #[serde(default)]
    pub config_hash: String,
}

impl EnsembleRun {
    pub fn predict(&self, x: &NumArray) -> Result<NumArray> {
        predict_ensemble(&self.members, x)
    }

    /// Writes `member_{k}.ckpt`, the trajectory log(s) and `manifest.json`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (k, m) in self.members.iter().enumerate() {
            m.save(&dir.join(format!("member_{k}.ckpt")))?;
        }
        match self.trajectories.as_slice() {
            [] => {}
            [shared] if self.mode == EnsembleMode::AradalsOfEnsemble => {
                write_trajectory(shared, &dir.join("trajectory.csv"))?
            }
            per_member => {
                for (k, t) in per_member.iter().enumerate() {
                    write_trajectory(t, &dir.join(format!("trajectory_member_{k}.csv")))?;
                }
            }
        }
        let manifest = EnsembleManifest {
            mode: self.mode,
            members: self.members.len(),
            seeds: self.seeds.clone(),
            policy: self.policy,
            config_hash: config_hash.to_string(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json + "\n")
            .map_err(|e| Error::io(format!("writing manifest in {}", dir.display()), e))
    }

    /// Loads members and manifest; trajectories are not read back.
    pub fn load(dir: &Path) -> Result<(EnsembleManifest, EnsembleRun)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let manifest: EnsembleManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let members = (0..manifest.members)
            .map(|k| Checkpoint::load(&dir.join(format!("member_{k}.ckpt"))))
            .collect::<Result<Vec<_>>>()?;
        let run = EnsembleRun {
            mode: manifest.mode,
            policy: manifest.policy,
            seeds: manifest.seeds.clone(),
            members,
            trajectories: Vec::new(),
        };
        Ok((manifest, run))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_opposites_is_uniform() {
        let a = NumArray::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = NumArray::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(mean_probs(&[a.clone(), b]).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(mean_probs(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert!(mean_probs(&[]).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            EnsembleMode::EnsembleOfVanilla,
            EnsembleMode::EnsembleOfLs,
            EnsembleMode::EnsembleOfAdals,
            EnsembleMode::EnsembleOfAradals,
            EnsembleMode::AradalsOfEnsemble,
        ] {
            assert_eq!(EnsembleMode::parse(m.name()).unwrap(), m);
        }
        assert!(EnsembleMode::parse("bagging").is_err());
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let ds = crate::data::synth(2, 2, 10, 0.5, 0).unwrap();
        let setup = EnsembleSetup {
            spec: MlpSpec::new(2, &[4], 2, 0),
            train: &ds,
            val: &ds,
            policy: Policy::Vanilla,
            cfg: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            partitions: None,
        };
        assert!(train_ensemble(&setup, &[1, 2, 1], EnsembleMode::EnsembleOfVanilla).is_err());
        assert!(train_ensemble(&setup, &[1, 2], EnsembleMode::EnsembleOfLs).is_err());
    }
}
