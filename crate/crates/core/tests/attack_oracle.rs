use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use calibrar::attack::{read_partition, scores_of, write_partition};
use calibrar::metrics::spearman;
use calibrar::{cw_l2, partition, robustness_scores, AttackConfig, Checkpoint, MlpSpec, NumArray};

/// Two-class linear softmax model with known boundary `(w1 − w0)·x + (b1 − b0) = 0`.
fn linear_model(seed: u64) -> (Checkpoint, Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ck = calibrar::init(&MlpSpec::new(3, &[], 2, seed)).unwrap();
    for v in ck.params[0].data_mut() {
        *v = rng.sample(StandardNormal);
    }
    ck.params[1].data_mut()[1] = 0.3;
    let w = &ck.params[0];
    let dw: Vec<f64> = (0..3).map(|j| w.get(j, 1) - w.get(j, 0)).collect();
    let db = ck.params[1].data()[1] - ck.params[1].data()[0];
    (ck, dw, db)
}

fn boundary_distance(dw: &[f64], db: f64, x: &[f64]) -> f64 {
    let margin: f64 = dw.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + db;
    margin.abs() / dw.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn points(seed: u64, n: usize) -> NumArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NumArray::matrix(n, 3, (0..3 * n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

#[test]
fn linear_model_scores_track_closed_form_distance() {
    let (ck, dw, db) = linear_model(1);
    let x = points(2, 60);
    let out = robustness_scores(&ck, &x, &AttackConfig::default()).unwrap();
    let scores = scores_of(&out);
    let exact: Vec<f64> = (0..x.rows()).map(|i| boundary_distance(&dw, db, x.row(i))).collect();
    for (s, d) in scores.iter().zip(&exact) {
        // no flipping perturbation can be shorter than the distance to the boundary
        assert!(*s >= d * (1.0 - 1e-9), "score {s} below distance {d}");
    }
    let rho = spearman(&scores, &exact).unwrap().unwrap();
    assert!(rho > 0.5, "Spearman {rho}");
    let mut ratios: Vec<f64> = scores.iter().zip(&exact).map(|(s, d)| s / d).collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[ratios.len() / 2] < 1.1, "median ratio {}", ratios[ratios.len() / 2]);
}

#[test]
fn successful_deltas_flip_the_prediction() {
    let (ck, _, _) = linear_model(3);
    let x = points(4, 20);
    let pred = ck.predict(&x).unwrap();
    for (i, o) in robustness_scores(&ck, &x, &AttackConfig::default()).unwrap().iter().enumerate() {
        let delta = o.delta().expect("linear model is always attackable");
        let moved: Vec<f64> = x.row(i).iter().zip(delta.data()).map(|(a, b)| a + b).collect();
        let now = ck.predict(&NumArray::matrix(1, 3, moved).unwrap()).unwrap()[0];
        assert_ne!(now, pred[i]);
    }
}

#[test]
fn duplicated_examples_get_identical_scores() {
    let (ck, _, _) = linear_model(5);
    let base = points(6, 5);
    let rows: Vec<Vec<f64>> = (0..10).map(|i| base.row(i % 5).to_vec()).collect();
    let x = NumArray::from_rows(&rows).unwrap();
    let s = scores_of(&robustness_scores(&ck, &x, &AttackConfig::default()).unwrap());
    for i in 0..5 {
        assert_eq!(s[i].to_bits(), s[i + 5].to_bits());
    }
}

#[test]
fn batched_and_single_row_attacks_agree() {
    let (ck, _, _) = linear_model(7);
    let x = points(8, 6);
    let cfg = AttackConfig::default();
    let batch = robustness_scores(&ck, &x, &cfg).unwrap();
    for (i, o) in batch.iter().enumerate() {
        assert_eq!(&cw_l2(&ck, x.row(i), &cfg).unwrap(), o);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (ck, _, _) = linear_model(9);
    let x = points(10, 1);
    for cfg in [
        AttackConfig {
            binary_search_steps: 0,
            ..AttackConfig::default()
        },
        AttackConfig {
            const_growth: 1.0,
            ..AttackConfig::default()
        },
        AttackConfig {
            step_size: f64::NAN,
            ..AttackConfig::default()
        },
    ] {
        assert!(robustness_scores(&ck, &x, &cfg).is_err());
    }
    assert!(cw_l2(&ck, &[0.0, 1.0], &AttackConfig::default()).is_err());
}

#[test]
fn partition_file_round_trip() {
    let scores = vec![0.4, f64::INFINITY, 0.1, 0.25, 0.25, 2.0, 0.05];
    let p = partition(&scores, 3).unwrap();
    // ascending (score, index): 6, 2, 3, 4, 0, 5, 1
    assert_eq!(p.assignment(), &[1, 2, 0, 0, 1, 2, 0]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_partition(&path, &p, "a1", "c2", "f3").unwrap();
    let (h, back) = read_partition(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!((h.subsets, h.attack_config_hash.as_str(), h.checkpoint_hash.as_str(), h.config_hash.as_str()), (3, "a1", "c2", "f3"));
}

#[test]
fn partition_sizes_differ_by_at_most_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1usize, 7, 10, 33, 100] {
        for r in 1..=10.min(n) {
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let sizes: Vec<usize> = partition(&scores, r).unwrap().members().iter().map(Vec::len).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "n={n} r={r} sizes {sizes:?}");
        }
    }
    assert!(partition(&[1.0], 2).is_err());
    assert!(partition(&[f64::NAN, 1.0], 1).is_err());
}

#[test]
fn partition_commutes_with_shuffling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scores: Vec<f64> = (0..57).map(|_| rng.random::<f64>()).collect();
    let base = partition(&scores, 6).unwrap();
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let shuffled: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
    let p = partition(&shuffled, 6).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(p.subset_of(k), base.subset_of(i));
    }
}
