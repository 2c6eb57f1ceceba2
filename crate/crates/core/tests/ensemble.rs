use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use calibrar::data::{self, Dataset};
use calibrar::ensemble::{self, EnsembleMode, EnsembleRun, EnsembleSetup};
use calibrar::metrics;
use calibrar::smoothing::OneHot;
use calibrar::{partition, MlpSpec, NumArray, Policy, TrainConfig};

fn splits() -> (Dataset, Dataset) {
    let ds = data::synth(3, 4, 50, 1.0, 8).unwrap();
    let (tr, va, _) = data::split(&ds, [0.6, 0.3, 0.1], 8).unwrap();
    (tr, va)
}

fn setup<'a>(tr: &'a Dataset, va: &'a Dataset, policy: Policy) -> EnsembleSetup<'a> {
    let scores: Vec<f64> = (0..tr.len()).map(|i| ((i * 17) % 23) as f64).collect();
    let vscores: Vec<f64> = (0..va.len()).map(|i| ((i * 5) % 9) as f64).collect();
    EnsembleSetup {
        spec: MlpSpec::new(tr.dim(), &[12, 12], tr.classes(), 0),
        train: tr,
        val: va,
        policy,
        cfg: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        partitions: Some((partition(&scores, 2).unwrap(), partition(&vscores, 2).unwrap())),
    }
}

#[test]
fn single_member_equals_plain_training() {
    let (tr, va) = splits();
    let s = setup(&tr, &va, Policy::Vanilla);
    let run = ensemble::train_ensemble(&s, &[42], EnsembleMode::EnsembleOfVanilla).unwrap();
    let mut spec = s.spec.clone();
    spec.seed = 42;
    let cfg = TrainConfig { seed: 42, ..s.cfg.clone() };
    let alone = calibrar::train(calibrar::init(&spec).unwrap(), &tr, &mut OneHot::new(&tr), &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(run.members[0].to_bytes().unwrap(), alone.to_bytes().unwrap());
}

#[test]
fn lockstep_members_share_one_state() {
    let (tr, va) = splits();
    let s = setup(&tr, &va, Policy::ArAdaLs { alpha: 0.05, subsets: 2 });
    let run = ensemble::train_ensemble(&s, &[1, 2, 3], EnsembleMode::AradalsOfEnsemble).unwrap();
    assert_eq!(run.trajectories.len(), 1);
    assert_eq!(run.trajectories[0].len(), 5 * 2);
    let states: Vec<_> = run.members.iter().map(|m| m.smoothing.clone().unwrap()).collect();
    assert!(states.windows(2).all(|w| w[0] == w[1]));
    // members differ even though labels are shared
    assert_ne!(run.members[0].params, run.members[1].params);
}

#[test]
fn independent_members_keep_their_own_state() {
    let (tr, va) = splits();
    let s = setup(&tr, &va, Policy::ArAdaLs { alpha: 0.5, subsets: 2 });
    let run = ensemble::train_ensemble(&s, &[1, 2, 3], EnsembleMode::EnsembleOfAradals).unwrap();
    assert_eq!(run.trajectories.len(), 3);
    let states: Vec<_> = run.members.iter().map(|m| m.smoothing.clone().unwrap()).collect();
    assert!(states.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn lockstep_update_uses_the_averaged_predictions() {
    let (tr, va) = splits();
    let mut s = setup(&tr, &va, Policy::AdaLs { alpha: 0.1 });
    s.cfg.epochs = 1;
    s.partitions = None;
    let lock = ensemble::train_ensemble(&s, &[4, 5], EnsembleMode::AradalsOfEnsemble).unwrap();
    let mean = lock.predict(va.features()).unwrap();
    let acc = metrics::accuracy(&mean, va.labels()).unwrap();
    let conf = metrics::mean_confidence(&mean);
    let row = &lock.trajectories[0][0];
    let p = (1.0 - 0.1 * (conf - acc)).clamp(1.0 / 3.0 + 1e-9, 1.0);
    assert!((row.correct - p).abs() < 1e-12, "{} vs {p}", row.correct);
}

#[test]
fn ensemble_is_no_more_confident_than_its_members() {
    let (tr, va) = splits();
    let s = setup(&tr, &va, Policy::Vanilla);
    let run = ensemble::train_ensemble(&s, &[7, 8, 9], EnsembleMode::EnsembleOfVanilla).unwrap();
    let ens = metrics::mean_confidence(&run.predict(va.features()).unwrap());
    let members: f64 = run
        .members
        .iter()
        .map(|m| metrics::mean_confidence(&m.predict_proba(va.features()).unwrap()))
        .sum::<f64>()
        / 3.0;
    assert!(ens <= members + 1e-15);
}

#[test]
fn save_and_load_round_trip() {
    let (tr, va) = splits();
    let s = setup(&tr, &va, Policy::ArAdaLs { alpha: 0.05, subsets: 2 });
    let run = ensemble::train_ensemble(&s, &[1, 2], EnsembleMode::AradalsOfEnsemble).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path(), "abc").unwrap();
    assert!(dir.path().join("trajectory.csv").exists());
    let (manifest, back) = EnsembleRun::load(dir.path()).unwrap();
    assert_eq!(manifest.config_hash, "abc");
    assert_eq!(manifest.seeds, vec![1, 2]);
    assert_eq!(back.members, run.members);
    assert_eq!(back.predict(va.features()).unwrap(), run.predict(va.features()).unwrap());
}

#[test]
fn mismatched_members_are_rejected() {
    let a = calibrar::init(&MlpSpec::new(4, &[5], 3, 0)).unwrap();
    let b = calibrar::init(&MlpSpec::new(4, &[5], 2, 0)).unwrap();
    let x = NumArray::zeros(&[2, 4]);
    assert!(ensemble::predict_ensemble(&[a, b], &x).is_err());
    assert!(ensemble::predict_ensemble(&[], &x).is_err());
}

#[test]
fn shared_trajectory_diverges_from_a_solo_member() {
    let (tr, va) = splits();
    let mut s = setup(&tr, &va, Policy::AdaLs { alpha: 0.5 });
    s.partitions = None;
    s.spec = MlpSpec::new(tr.dim(), &[3], tr.classes(), 0);
    s.cfg.epochs = 3;
    // tiny members trained from different seeds disagree on validation
    let lock = ensemble::train_ensemble(&s, &[1, 2, 3], EnsembleMode::AradalsOfEnsemble).unwrap();
    let solo = ensemble::train_ensemble(&s, &[1], EnsembleMode::AradalsOfEnsemble).unwrap();
    let first = |run: &EnsembleRun| (run.trajectories[0][0].confidence, run.trajectories[0][0].accuracy);
    assert_ne!(first(&lock), first(&solo));
    assert_ne!(lock.trajectories[0], solo.trajectories[0]);
}

#[test]
fn mean_is_bounded_by_the_most_confident_member() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let members: Vec<NumArray> = (0..rng.random_range(1..6))
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                NumArray::matrix(1, 4, raw.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let mean = ensemble::mean_probs(&members).unwrap();
        assert!((mean.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = |r: &[f64]| r.iter().cloned().fold(0.0, f64::max);
        let best = members.iter().map(|m| top(m.row(0))).fold(0.0, f64::max);
        assert!(top(mean.row(0)) <= best);
    }
}
