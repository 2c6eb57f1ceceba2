use calibrar::data::{self, Dataset};
use calibrar::smoothing::{
    correct_from_epsilon, epsilon_from_correct, labels_for_epoch, soften, AdaptiveSmoothing, OneHot, SmoothingState,
    SubsetValStats, LOWER_MARGIN,
};
use calibrar::{partition, precompute_partition, AttackConfig, Checkpoint, MlpSpec, Policy, PartitionSource, RobustnessPartition, TrainConfig};

fn small() -> (Dataset, Dataset) {
    let ds = data::synth(3, 4, 60, 0.9, 5).unwrap();
    let (tr, va, _) = data::split(&ds, [0.6, 0.3, 0.1], 5).unwrap();
    (tr, va)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 2,
        ..TrainConfig::default()
    }
}

fn init(tr: &Dataset) -> Checkpoint {
    calibrar::init(&MlpSpec::new(tr.dim(), &[16, 16], tr.classes(), 2)).unwrap()
}

#[test]
fn conversions_match_hand_values() {
    assert!((correct_from_epsilon(0.1, 10).unwrap() - 0.91).abs() < 1e-15);
    assert!((epsilon_from_correct(0.91, 10).unwrap() - 0.1).abs() < 1e-14);
    assert_eq!(correct_from_epsilon(0.0, 4).unwrap(), 1.0);
    assert!(epsilon_from_correct(0.2, 4).is_err());
    let s = soften(&[0.0, 1.0, 0.0, 0.0], 0.2).unwrap();
    for (a, b) in s.iter().zip([0.05, 0.85, 0.05, 0.05]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn overconfident_subset_is_softened_and_underconfident_sharpened() {
    let s = SmoothingState::new(2, 4, 0.1).unwrap();
    let s = SmoothingState {
        correct: vec![0.9, 0.9],
        epsilon: vec![epsilon_from_correct(0.9, 4).unwrap(); 2],
        ..s
    };
    let stats = SubsetValStats::new(vec![0.9, 0.5], vec![0.6, 0.7]).unwrap();
    let next = s.adaptive_update(&stats).unwrap();
    assert!((next.correct[0] - (0.9 - 0.1 * 0.3)).abs() < 1e-15);
    assert!((next.correct[1] - (0.9 + 0.1 * 0.2)).abs() < 1e-15);
    assert_eq!(next.epoch, 1);
}

#[test]
fn update_clips_to_both_bounds() {
    let s = SmoothingState::new(2, 5, 10.0).unwrap();
    let stats = SubsetValStats::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
    let next = s.adaptive_update(&stats).unwrap();
    assert_eq!(next.correct[0], 0.2 + LOWER_MARGIN);
    assert_eq!(next.correct[1], 1.0);
    assert!(next.epsilon[0] < 1.0 && next.epsilon[0] > 0.99);
}

#[test]
fn epoch_labels_follow_subset_epsilon() {
    let s = SmoothingState {
        correct: vec![1.0, 0.7],
        epsilon: vec![0.0, epsilon_from_correct(0.7, 3).unwrap()],
        ..SmoothingState::new(2, 3, 0.1).unwrap()
    };
    let part = RobustnessPartition::from_assignment(vec![1, 0, 1], 2).unwrap();
    let t = labels_for_epoch(&s, &part, &[2, 0, 1]).unwrap();
    assert_eq!(t.row(1), &[1.0, 0.0, 0.0]);
    assert!((t.row(0)[2] - 0.7).abs() < 1e-15 && (t.row(0)[0] - 0.15).abs() < 1e-15);
    assert!((t.row(2)[1] - 0.7).abs() < 1e-15);
    for i in 0..3 {
        assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn every_logged_step_is_one_adaptive_update() {
    let (tr, va) = small();
    let scores: Vec<f64> = (0..tr.len()).map(|i| ((i * 37) % 11) as f64).collect();
    let vscores: Vec<f64> = (0..va.len()).map(|i| ((i * 13) % 7) as f64).collect();
    let mut sup = AdaptiveSmoothing::new(&tr, &va, partition(&scores, 3).unwrap(), partition(&vscores, 3).unwrap(), 0.05).unwrap();
    calibrar::train(init(&tr), &tr, &mut sup, &cfg(6), |_, _| Ok(())).unwrap();
    let hist = sup.history();
    assert_eq!(hist.len(), 6);
    for w in hist.windows(2) {
        assert_eq!(w[0].0.adaptive_update(&w[0].1).unwrap(), w[1].0);
    }
    let (last, stats) = hist.last().unwrap();
    assert_eq!(&last.adaptive_update(stats).unwrap(), sup.state());
    assert_eq!(sup.trajectory().len(), 6 * 3);
}

#[test]
fn trained_checkpoint_records_final_state() {
    let (tr, va) = small();
    let mut sup = AdaptiveSmoothing::without_robustness(&tr, &va, 0.05).unwrap();
    let ck = calibrar::train(init(&tr), &tr, &mut sup, &cfg(3), |_, _| Ok(())).unwrap();
    assert_eq!(ck.smoothing.as_ref(), Some(sup.state()));
    assert_eq!(ck.epoch, 3);
}

#[test]
fn on_the_fly_starts_from_the_precomputed_partition() {
    let (tr, va) = small();
    let attack = AttackConfig {
        max_iterations: 100,
        ..AttackConfig::default()
    };
    let start = init(&tr);
    let (tp, vp) = precompute_partition(&start, &tr, &va, 3, &attack).unwrap();
    let mut fixed = AdaptiveSmoothing::new(&tr, &va, tp.clone(), vp, 0.05).unwrap();
    let mut fly = AdaptiveSmoothing::on_the_fly(&tr, &va, &start, 3, 0.05, &attack).unwrap();
    assert_eq!(fly.train_partition(), &tp);

    let a = calibrar::train(start.clone(), &tr, &mut fixed, &cfg(1), |_, _| Ok(())).unwrap();
    let mut first = None;
    calibrar::train(start, &tr, &mut fly, &cfg(3), |r, ck| {
        if r.epoch == 1 {
            first = Some(ck.params.clone());
        }
        Ok(())
    })
    .unwrap();
    // identical first epoch; the on-the-fly source then re-attacks the new model
    assert_eq!(Some(a.params), first);
    assert_eq!(fly.history().len(), 3);
    for w in fly.history().windows(2) {
        assert_eq!(w[0].0.adaptive_update(&w[0].1).unwrap(), w[1].0);
    }
}

#[test]
fn label_smoothing_zero_equals_vanilla() {
    let (tr, va) = small();
    let start = init(&tr);
    let mut van = OneHot::new(&tr);
    let a = calibrar::train(start.clone(), &tr, &mut van, &cfg(4), |_, _| Ok(())).unwrap();
    let mut ls = Policy::LabelSmoothing { epsilon: 0.0 }.supervisor(&tr, &va, None, &start).unwrap();
    let b = calibrar::train(start, &tr, ls.as_mut(), &cfg(4), |_, _| Ok(())).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn robustness_policy_needs_a_partition() {
    let (tr, va) = small();
    let start = init(&tr);
    let p = Policy::ArAdaLs { alpha: 0.01, subsets: 2 };
    assert!(p.supervisor(&tr, &va, None, &start).is_err());
    let wrong_r = PartitionSource::Precomputed {
        train: RobustnessPartition::single(tr.len()),
        val: RobustnessPartition::single(va.len()),
    };
    assert!(p.supervisor(&tr, &va, Some(wrong_r), &start).is_err());
}
