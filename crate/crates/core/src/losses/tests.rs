use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::forward_backward;

fn one_hot_rows(classes: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), NUM_CLASSES]);
    for (r, &c) in classes.iter().enumerate() {
        t.data_mut()[r * NUM_CLASSES + c] = 1.0;
    }
    t
}

fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

#[test]
fn smoothing_zero_is_identity() {
    let t = one_hot_rows(&[0, 3, 6]);
    assert_eq!(smooth_labels(&t, 0.0).unwrap(), t);
}

#[test]
fn smoothing_one_hot_values() {
    let s = smooth_labels(&one_hot_rows(&[0]), 0.1).unwrap();
    assert!((s.data()[0] - (0.9 + 0.1 / 7.0)).abs() < 1e-15);
    assert!((s.data()[0] - 0.914286).abs() < 1e-6);
    for &v in &s.data()[1..] {
        assert!((v - 0.1 / 7.0).abs() < 1e-15);
        assert!((v - 0.014286).abs() < 1e-6);
    }
}

#[test]
fn smoothing_mixed_row_matches_formula() {
    let mut row = vec![0.0; 7];
    row[0] = 0.5;
    row[1] = 0.5;
    let t = Tensor::matrix(1, 7, row.clone()).unwrap();
    let s = smooth_labels(&t, 0.1).unwrap();
    assert!((s.sum() - 1.0).abs() < 1e-12);
    for (a, y) in s.data().iter().zip(&row) {
        assert_eq!(*a, 0.9 * y + 0.1 / 7.0);
    }
}

#[test]
fn smoothing_rejects_bad_epsilon() {
    let t = one_hot_rows(&[0]);
    assert!(matches!(smooth_labels(&t, 1.0), Err(SerError::Config(_))));
    assert!(matches!(smooth_labels(&t, -0.1), Err(SerError::Config(_))));
}

#[test]
fn ce_uniform_probs_is_ln7() {
    let probs = Tensor::filled(&[4, 7], 1.0 / 7.0);
    let l = weighted_cross_entropy(&probs, &one_hot_rows(&[0, 2, 4, 6]), &[1.0; 7]).unwrap();
    assert!((l - 7f64.ln()).abs() < 1e-9);
    assert!((l - 1.945910).abs() < 1e-6);
}

#[test]
fn ce_perfect_prediction_is_near_zero() {
    let t = one_hot_rows(&[1, 5]);
    let l = weighted_cross_entropy(&t, &t, &[1.0; 7]).unwrap();
    assert!(l.abs() < 1e-12);
}

#[test]
fn ce_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = [2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    let p: Vec<Vec<f64>> = (0..3).map(|_| random_distribution(&mut rng)).collect();
    let y: Vec<Vec<f64>> = (0..3).map(|_| random_distribution(&mut rng)).collect();
    let mut expect = 0.0;
    for b in 0..3 {
        for i in 0..7 {
            expect -= w[i] * y[b][i] * p[b][i].ln();
        }
    }
    expect /= 3.0;
    let got = weighted_cross_entropy(&Tensor::from_rows(&p).unwrap(), &Tensor::from_rows(&y).unwrap(), &w).unwrap();
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn ce_rejects_negative_weights() {
    let p = Tensor::filled(&[1, 7], 1.0 / 7.0);
    let mut w = [1.0; 7];
    w[3] = -1.0;
    assert!(matches!(
        weighted_cross_entropy(&p, &one_hot_rows(&[0]), &w),
        Err(SerError::Config(_))
    ));
}

#[test]
fn ce_is_monotone_in_true_class_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = [1.5, 0.5, 1.0, 2.0, 1.0, 0.7, 1.3];
    for _ in 0..200 {
        let p = random_distribution(&mut rng);
        let c = rng.random_range(0..7);
        let target = smooth_labels(&one_hot_rows(&[c]), 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let q = p[c] + (1.0 - p[c]) * step as f64 / 10.0;
            let others = (1.0 - q) / (1.0 - p[c]);
            let row: Vec<f64> = (0..7).map(|i| if i == c { q } else { p[i] * others }).collect();
            let l = weighted_cross_entropy(&Tensor::matrix(1, 7, row).unwrap(), &target, &w).unwrap();
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }
}

#[test]
fn class_weights_uniform_counts() {
    assert_eq!(class_weights_from_counts(&[5.0; 7]).unwrap(), vec![1.0; 7]);
}

#[test]
fn class_weights_favour_rare_classes() {
    let w = class_weights_from_counts(&[70.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0]).unwrap();
    assert!((w.iter().sum::<f64>() / 7.0 - 1.0).abs() < 1e-12);
    for &x in &w[1..] {
        assert!(x > w[0]);
    }
}

#[test]
fn class_weights_empty_class_and_all_zero() {
    let w = class_weights_from_counts(&[3.0, 0.0, 3.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
    assert!(w.iter().all(|x| x.is_finite()));
    assert!(w[1] > w[0]);
    assert!(matches!(class_weights_from_counts(&[0.0; 7]), Err(SerError::Config(_))));
}

#[test]
fn ccc_fixtures() {
    let y = [0.1, 0.4, 0.35, 0.9];
    assert!((ccc(&y, &y, 0.0).unwrap() - 1.0).abs() < 1e-9);
    assert!((ccc(&[0.0, 1.0], &[1.0, 0.0], 0.0).unwrap() + 1.0).abs() < 1e-9);
    assert!(ccc(&[0.0, 1.0], &[0.5, 0.5], 0.0).unwrap().abs() < 1e-9);
    assert_eq!(ccc(&[0.3], &[0.7], 1e-8).unwrap(), 0.0);
    assert!(matches!(ccc(&[], &[], 1e-8), Err(SerError::EmptyInput(_))));
}

#[test]
fn ccc_eps_enters_denominator_only() {
    // y=[0,1], ŷ=[1,0]: cov −0.25, both variances 0.25, equal means
    let got = ccc(&[0.0, 1.0], &[1.0, 0.0], 1e-8).unwrap();
    assert!((got - (-0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    let got = ccc(&[0.0, 1.0], &[0.0, 1.0], 1e-8).unwrap();
    assert!((got - 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    // both constant with equal means: 0 rather than 0/0
    assert_eq!(ccc(&[0.4, 0.4], &[0.4, 0.4], 1e-8).unwrap(), 0.0);
}

#[test]
fn ccc_shift_strictly_decreases() {
    let y = [0.2, 0.5, 0.1, 0.8, 0.4];
    let base = ccc(&y, &y, 1e-8).unwrap();
    for c in [-0.3, -0.01, 0.01, 0.5] {
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert!(ccc(&y, &shifted, 1e-8).unwrap() < base);
    }
}

#[test]
fn ccc_fuzz_bounded_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let n = rng.random_range(1..12);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = ccc(&y, &h, 1e-8).unwrap();
        let b = ccc(&h, &y, 1e-8).unwrap();
        assert!(a.abs() <= 1.0 + 1e-9);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ccc_loss_fixtures() {
    let v = Tensor::from_rows(&[vec![0.1, 0.9, 0.3], vec![0.7, 0.2, 0.6], vec![0.4, 0.5, 0.95]]).unwrap();
    let t = DimTargets::all_present(v.clone()).unwrap();
    assert!(ccc_loss_multi(&t, &v, 0.0).unwrap().abs() < 1e-9);
    let y = Tensor::from_rows(&[vec![0.0; 3], vec![1.0; 3]]).unwrap();
    let p = Tensor::from_rows(&[vec![1.0; 3], vec![0.0; 3]]).unwrap();
    let l = ccc_loss_multi(&DimTargets::all_present(y).unwrap(), &p, 0.0).unwrap();
    assert!((l - 2.0).abs() < 1e-9);
}

#[test]
fn ccc_loss_is_mean_of_dimension_cccs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = Tensor::uniform(&[16, 3], 0.0, 1.0, &mut rng);
    let p = Tensor::uniform(&[16, 3], 0.0, 1.0, &mut rng);
    let got = ccc_loss_multi(&DimTargets::all_present(y.clone()).unwrap(), &p, 1e-8).unwrap();
    let col = |t: &Tensor, d: usize| (0..16).map(|i| t.at(i, d)).collect::<Vec<_>>();
    let expect = (0..3)
        .map(|d| 1.0 - ccc(&col(&y, d), &col(&p, d), 1e-8).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn ccc_loss_respects_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = Tensor::uniform(&[6, 3], 0.0, 1.0, &mut rng);
    let p = Tensor::uniform(&[6, 3], 0.0, 1.0, &mut rng);
    let mask = vec![true, false, true, true, false, true];
    let masked = ccc_loss_multi(&DimTargets::new(y.clone(), mask.clone()).unwrap(), &p, 1e-8).unwrap();
    let keep: Vec<usize> = (0..6).filter(|&i| mask[i]).collect();
    let sub = |t: &Tensor| Tensor::from_rows(&keep.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let direct = ccc_loss_multi(&DimTargets::all_present(sub(&y)).unwrap(), &sub(&p), 1e-8).unwrap();
    assert!((masked - direct).abs() < 1e-15);
    let one = DimTargets::new(y, vec![false, false, true, false, false, false]).unwrap();
    assert_eq!(ccc_loss_multi(&one, &p, 1e-8).unwrap(), 0.0);
}

#[test]
fn total_loss_arithmetic() {
    let cfg = LossConfig::default();
    assert!((total_loss(1.0, 0.4, &cfg).unwrap() - 1.2).abs() < 1e-15);
    let no_dim = LossConfig {
        lambda_dim: 0.0,
        ..LossConfig::default()
    };
    assert_eq!(total_loss(0.731, 0.4, &no_dim).unwrap(), 0.731);
    assert!(matches!(total_loss(f64::NAN, 0.4, &cfg), Err(SerError::NonFinite { what }) if what.contains("ce")));
    assert!(matches!(total_loss(1.0, f64::INFINITY, &cfg), Err(SerError::NonFinite { what }) if what.contains("ccc")));
}

#[test]
fn total_gradient_is_weighted_sum_of_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = Tensor::uniform(&[5, 7], -2.0, 2.0, &mut rng);
    let raw = Tensor::uniform(&[5, 3], -2.0, 2.0, &mut rng);
    let targets = smooth_labels(&one_hot_rows(&[0, 1, 2, 3, 4]), 0.1).unwrap();
    let dims = DimTargets::all_present(Tensor::uniform(&[5, 3], 0.0, 1.0, &mut rng)).unwrap();
    let cfg = LossConfig {
        class_weights: vec![1.2, 0.8, 1.0, 1.1, 0.9, 1.0, 1.0],
        ..LossConfig::default()
    };
    let run = |which: u8| {
        forward_backward(&[("l", &logits, true), ("d", &raw, true)], |g, v| {
            let probs = g.softmax_rows(v["l"])?;
            let d = g.sigmoid(v["d"])?;
            let o = objective_graph(g, probs, d, &targets, &dims, &cfg)?;
            Ok(match which {
                0 => o.total,
                1 => o.ce,
                _ => o.ccc,
            })
        })
        .unwrap()
        .1
    };
    let (total, ce, cc) = (run(0), run(1), run(2));
    for k in ["l", "d"] {
        for i in 0..total[k].len() {
            let combo = cfg.lambda_cat * ce[k].data()[i] + cfg.lambda_dim * cc[k].data()[i];
            assert!((total[k].data()[i] - combo).abs() < 1e-10);
        }
    }
}

proptest! {
    #[test]
    fn smoothed_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 7), 1..20), eps in 0.0f64..0.99) {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-3;
                r.iter().map(|v| (v + 1e-3 / 7.0) / s).collect()
            })
            .collect();
        let s = smooth_labels(&Tensor::from_rows(&rows).unwrap(), eps).unwrap();
        for r in 0..s.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
