use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use calibrar::tape::{Tape, LOG_CLAMP};
use calibrar::{NodeId, NumArray};

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> NumArray {
    NumArray::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> NumArray {
    NumArray::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Compares tape gradients of a scalar graph against central differences.
/// `build` maps input nodes to a scalar loss node.
fn check<F>(inputs: &[NumArray], build: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[NumArray]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<_> = vals.iter().map(|v| t.param(v.clone())).collect();
        let out = build(&mut t, &ids);
        t.value(out).unwrap().item()
    };
    let mut t = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|v| t.param(v.clone())).collect();
    let out = build(&mut t, &ids);
    let grads = t.grad(out, &ids).unwrap();
    let h = 1e-6;
    for (a, g) in grads.iter().enumerate() {
        assert_eq!(g.shape(), inputs[a].shape());
        for k in 0..g.len() {
            let mut plus = inputs.to_vec();
            plus[a].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[a].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (g.data()[k] - fd).abs() / g.data()[k].abs().max(fd.abs()).max(1e-4);
            assert!(err < 1e-5, "input {a} entry {k}: tape {} vs fd {fd}", g.data()[k]);
        }
    }
}

#[test]
fn matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [randn(&mut rng, 3, 4), randn(&mut rng, 4, 2), randn(&mut rng, 1, 2).reshape(&[2]).unwrap()];
    check(&inputs, |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        let b = t.add_bias(m, v[2]).unwrap();
        let sq = t.mul(b, b).unwrap();
        t.sum(sq).unwrap()
    });
}

#[test]
fn relu_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut x = randn(&mut rng, 4, 3);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let w = randn(&mut rng, 4, 3);
    check(&[x, w], |t, v| {
        let r = t.relu(v[0]).unwrap();
        let p = t.mul(r, v[1]).unwrap();
        t.sum(p).unwrap()
    });
}

#[test]
fn softmax_log_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, 3, 5);
    let targets = NumArray::matrix(
        3,
        5,
        vec![
            0.6, 0.1, 0.1, 0.1, 0.1, //
            0.0, 1.0, 0.0, 0.0, 0.0, //
            0.2, 0.2, 0.2, 0.2, 0.2,
        ],
    )
    .unwrap();
    let tgt = targets.clone();
    check(std::slice::from_ref(&x), move |t, v| {
        let p = t.softmax(v[0]).unwrap();
        t.cross_entropy_soft(p, &tgt).unwrap()
    });
    let w = randn(&mut rng, 3, 5);
    check(&[x, w], |t, v| {
        let p = t.softmax(v[0]).unwrap();
        let l = t.log(p).unwrap();
        let m = t.mul(l, v[1]).unwrap();
        t.mean(m).unwrap()
    });
}

#[test]
fn elementwise_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(&mut rng, 2, 3);
    let b = randn(&mut rng, 2, 3);
    let c = positive(&mut rng, 2, 3);
    check(&[a, b, c], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[2]).unwrap();
        let m = t.mul(d, v[0]).unwrap();
        let k = t.scale(m, -1.7).unwrap();
        let l = t.log(v[2]).unwrap();
        let e = t.add(k, l).unwrap();
        t.sum(e).unwrap()
    });
}

#[test]
fn reused_node_accumulates() {
    let mut t = Tape::new();
    let x = t.param(NumArray::vector(vec![3.0]).unwrap());
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    let s = t.sum(z).unwrap();
    let g = t.grad(s, &[x]).unwrap();
    assert_eq!(g[0].data(), &[7.0]);
}

#[test]
fn vjp_with_explicit_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randn(&mut rng, 2, 3);
    let b = randn(&mut rng, 3, 4);
    let mut t = Tape::new();
    let ia = t.param(a.clone());
    let ib = t.param(b.clone());
    let out = t.matmul(ia, ib).unwrap();
    let seed = randn(&mut rng, 2, 4);
    let g = t.vjp(out, seed.clone(), &[ia, ib]).unwrap();
    // d⟨S, AB⟩/dA = S Bᵀ, d/dB = Aᵀ S
    assert_eq!(g[0], seed.matmul_transpose_rhs(&b).unwrap());
    assert_eq!(g[1], a.matmul_transpose_lhs(&seed).unwrap());
}

#[test]
fn log_clamps_zero() {
    let mut t = Tape::new();
    let x = t.param(NumArray::vector(vec![0.0, 1.0]).unwrap());
    let l = t.log(x).unwrap();
    assert_eq!(t.value(l).unwrap().data()[0], LOG_CLAMP.ln());
    assert!(t.value(l).unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn constants_get_no_gradient_request() {
    let mut t = Tape::new();
    let c = t.constant(NumArray::vector(vec![2.0]).unwrap());
    let x = t.param(NumArray::vector(vec![5.0]).unwrap());
    let y = t.mul(c, x).unwrap();
    let s = t.sum(y).unwrap();
    assert_eq!(t.grad(s, &[x]).unwrap()[0].data(), &[2.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut t = Tape::new();
    let a = t.param(NumArray::zeros(&[2, 3]));
    let b = t.param(NumArray::zeros(&[2, 3]));
    assert!(t.matmul(a, b).is_err());
    let v = t.param(NumArray::zeros(&[4]));
    assert!(t.add(a, v).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut t = Tape::new();
        let x = t.param(NumArray::matrix(3, 4, vals).unwrap());
        let p = t.softmax(x).unwrap();
        let p = t.value(p).unwrap();
        for i in 0..3 {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero(vals in prop::collection::vec(-5.0f64..5.0, 8), w in prop::collection::vec(-1.0f64..1.0, 8)) {
        let mut t = Tape::new();
        let x = t.param(NumArray::matrix(2, 4, vals).unwrap());
        let wn = t.constant(NumArray::matrix(2, 4, w).unwrap());
        let p = t.softmax(x).unwrap();
        let m = t.mul(p, wn).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.grad(s, &[x]).unwrap();
        for i in 0..2 {
            prop_assert!(g[0].row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_tapeless_value(vals in prop::collection::vec(-5.0f64..5.0, 6)) {
        let logits = NumArray::matrix(2, 3, vals).unwrap();
        let targets = NumArray::matrix(2, 3, vec![0.8, 0.1, 0.1, 0.0, 0.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let x = t.param(logits.clone());
        let p = t.softmax(x).unwrap();
        let l = t.cross_entropy_soft(p, &targets).unwrap();
        let direct = calibrar::tape::cross_entropy_value(&logits.softmax_rows().unwrap(), &targets);
        prop_assert!((t.value(l).unwrap().item() - direct).abs() < 1e-12);
    }
}
