use proptest::prelude::*;

use calibrar::metrics::{self, Binning};
use calibrar::{partition, NumArray};

fn probs(rows: &[&[f64]]) -> NumArray {
    NumArray::from_rows(rows).unwrap()
}

/// Variance recomputed from its definition with a two-pass mean.
fn variance_oracle(models: &[NumArray], labels_len: usize) -> f64 {
    let m = models.len() as f64;
    let mut total = 0.0;
    for i in 0..labels_len {
        let z = models[0].cols();
        let mean: Vec<f64> = (0..z).map(|c| models.iter().map(|p| p.get(i, c)).sum::<f64>() / m).collect();
        let mut k = 0;
        for c in 1..z {
            if mean[c] > mean[k] {
                k = c;
            }
        }
        total += models.iter().map(|p| (p.get(i, k) - mean[k]).powi(2)).sum::<f64>();
    }
    total / ((m - 1.0) * labels_len as f64)
}

#[test]
fn hand_computed_two_bucket_case() {
    // bucket (0.5, 1]: one right one wrong at 0.9; bucket (0, 0.5]: one right at 0.4
    let p = probs(&[&[0.9, 0.05, 0.05], &[0.05, 0.9, 0.05], &[0.4, 0.3, 0.3]]);
    let r = metrics::ece(&p, &[0, 0, 0], 2).unwrap();
    let want = (2.0 / 3.0) * (0.5f64 - 0.9).abs() + (1.0 / 3.0) * (1.0f64 - 0.4).abs();
    assert!((r.ece - want).abs() < 1e-15, "{} vs {want}", r.ece);
}

#[test]
fn boundary_confidence_goes_to_lower_bucket() {
    let p = probs(&[&[0.5, 0.5], &[0.6, 0.4]]);
    let r = metrics::ece(&p, &[0, 1], 10).unwrap();
    assert_eq!(r.buckets[4].count, 1); // (0.4, 0.5]
    assert_eq!(r.buckets[5].count, 1); // (0.5, 0.6]
    assert_eq!(metrics::bucket_index(0.5, 10), 4);
    assert_eq!(metrics::bucket_index(1.0, 10), 9);
}

#[test]
fn perfectly_calibrated_buckets_score_zero() {
    // half right at confidence 0.5, all right at confidence 1
    let p = probs(&[&[0.5, 0.5], &[0.5, 0.5], &[1.0, 0.0], &[0.0, 1.0]]);
    let r = metrics::ece(&p, &[0, 1, 0, 1], 15).unwrap();
    assert_eq!(r.ece, 0.0);
}

#[test]
fn single_bucket_is_gap_of_means() {
    let p = probs(&[&[0.9, 0.1], &[0.7, 0.3], &[0.2, 0.8]]);
    let r = metrics::ece(&p, &[0, 1, 1], 1).unwrap();
    assert!((r.ece - ((0.9 + 0.7 + 0.8) / 3.0 - 2.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn equal_count_binning_is_available() {
    let p = probs(&[&[0.9, 0.1], &[0.6, 0.4], &[0.8, 0.2], &[0.55, 0.45]]);
    let r = metrics::ece_with(&p, &[0, 0, 1, 1], 2, Binning::EqualCount).unwrap();
    assert_eq!(r.buckets.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let p = probs(&[&[0.9, 0.1]]);
    assert!(metrics::ece(&p, &[0, 1], 10).is_err());
    assert!(metrics::ece(&p, &[0], 0).is_err());
    assert!(NumArray::from_rows(&[[f64::NAN, 0.5]]).is_err());
    assert!(metrics::variance(std::slice::from_ref(&p), &[0]).is_err());
}

#[test]
fn variance_matches_definition() {
    let a = probs(&[&[0.9, 0.1], &[0.4, 0.6], &[0.2, 0.8]]);
    let b = probs(&[&[0.7, 0.3], &[0.5, 0.5], &[0.3, 0.7]]);
    let c = probs(&[&[0.8, 0.2], &[0.9, 0.1], &[0.1, 0.9]]);
    let ms = [a, b, c];
    let got = metrics::variance(&ms, &[0, 1, 1]).unwrap().sigma2;
    assert!((got - variance_oracle(&ms, 3)).abs() < 1e-15);
}

#[test]
fn identical_models_have_zero_variance() {
    let a = probs(&[&[0.9, 0.1], &[0.4, 0.6]]);
    assert_eq!(metrics::variance(&[a.clone(), a.clone(), a], &[0, 0]).unwrap().sigma2, 0.0);
}

#[test]
fn subset_stats_cover_every_example() {
    let p = probs(&[&[0.9, 0.1], &[0.4, 0.6], &[0.2, 0.8], &[0.6, 0.4]]);
    let part = partition(&[0.3, 0.1, 0.4, 0.2], 2).unwrap();
    let st = metrics::per_subset_stats(&p, &[0, 0, 1, 1], &part, 10, None).unwrap();
    assert_eq!(st.iter().map(|s| s.count).sum::<usize>(), 4);
    // least robust pair: rows 1 and 3
    assert_eq!(st[0].accuracy, 0.0);
    assert!((st[0].confidence - 0.6).abs() < 1e-15);
}

proptest! {
    #[test]
    fn ece_bounded_and_matches_oracle_on_two_classes(
        conf in prop::collection::vec(0.5f64..=1.0, 1..60),
        right in prop::collection::vec(any::<bool>(), 60),
        bins in 1usize..20,
    ) {
        let rows: Vec<Vec<f64>> = conf.iter().map(|&c| vec![c, 1.0 - c]).collect();
        let p = NumArray::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..conf.len()).map(|i| if right[i] { 0 } else { 1 }).collect();
        let r = metrics::ece(&p, &labels, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ece));
        // weighted |acc − conf| summed per bucket, recomputed independently
        let mut oracle = 0.0;
        for k in 0..bins {
            let (lo, hi) = (k as f64 / bins as f64, (k + 1) as f64 / bins as f64);
            let idx: Vec<usize> = (0..conf.len()).filter(|&i| conf[i] > lo && conf[i] <= hi).collect();
            if idx.is_empty() { continue; }
            let n = idx.len() as f64;
            let acc = idx.iter().filter(|&&i| right[i]).count() as f64 / n;
            let c = idx.iter().map(|&i| conf[i]).sum::<f64>() / n;
            oracle += n / conf.len() as f64 * (acc - c).abs();
        }
        prop_assert!((r.ece - oracle).abs() < 1e-12);
    }

    #[test]
    fn quartiles_are_ordered(vals in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let q = metrics::quartiles(&vals).unwrap();
        prop_assert!(q.min <= q.q25 && q.q25 <= q.median && q.median <= q.q75 && q.q75 <= q.max);
    }
}

#[test]
fn variance_ignores_model_and_example_order() {
    let a = probs(&[&[0.9, 0.1], &[0.4, 0.6], &[0.2, 0.8]]);
    let b = probs(&[&[0.7, 0.3], &[0.5, 0.5], &[0.3, 0.7]]);
    let c = probs(&[&[0.8, 0.2], &[0.9, 0.1], &[0.1, 0.9]]);
    let labels = [0, 1, 1];
    let v = metrics::variance(&[a.clone(), b.clone(), c.clone()], &labels).unwrap().sigma2;
    let swapped = metrics::variance(&[c.clone(), a.clone(), b.clone()], &labels).unwrap().sigma2;
    assert!((v - swapped).abs() < 1e-15);
    let order = [2, 0, 1];
    let re: Vec<NumArray> = [a, b, c].iter().map(|p| p.select_rows(&order)).collect();
    let relabelled: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    assert!((v - metrics::variance(&re, &relabelled).unwrap().sigma2).abs() < 1e-15);
}
