use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::losses::smooth_labels;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_features(t: usize, d: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[t, d], -2.0, 2.0, &mut rng(seed))
}

#[test]
fn speed_lengths() {
    let x = random_features(100, 3, 1);
    assert_eq!(speed_perturb(&x, 0.9).unwrap().rows(), 111);
    assert_eq!(speed_perturb(&x, 1.1).unwrap().rows(), 91);
    assert_eq!(speed_perturb(&x, 1.0).unwrap(), x);
    for t in 1..300 {
        let x = Tensor::zeros(&[t, 2]);
        for f in [0.9, 1.1] {
            let y = speed_perturb(&x, f).unwrap();
            assert_eq!(y.rows(), (t as f64 / f).round() as usize);
            assert_eq!(y.cols(), 2);
        }
    }
}

#[test]
fn speed_keeps_constants_and_endpoints() {
    let x = Tensor::filled(&[37, 4], 0.3);
    for f in [0.5, 0.9, 1.1, 2.0] {
        let y = speed_perturb(&x, f).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }
    let ramp = Tensor::new(vec![10, 1], (0..10).map(f64::from).collect()).unwrap();
    let y = speed_perturb(&ramp, 0.9).unwrap();
    for (j, &v) in y.data().iter().enumerate() {
        assert!((v - (j as f64 * 0.9).min(9.0)).abs() < 1e-12);
    }
}

#[test]
fn speed_errors() {
    let x = random_features(1, 2, 0);
    assert!(matches!(speed_perturb(&x, 3.0), Err(SerError::DegenerateLength(_))));
    assert!(matches!(speed_perturb(&x, 0.0), Err(SerError::Config(_))));
}

#[test]
fn snr_is_exact() {
    let mut r = rng(5);
    for trial in 0..200 {
        let x = random_features(20 + trial % 13, 5, trial as u64);
        let snr = r.random_range(-10.0..30.0);
        let y = add_noise_snr(&x, snr, &WhiteNoise, &mut r).unwrap();
        let noise = Tensor::new(
            x.shape().to_vec(),
            y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect(),
        )
        .unwrap();
        assert!((snr_db(&x, &noise) - snr).abs() < 1e-6, "trial {trial}");
    }
}

#[test]
fn unit_power_zero_db() {
    let x = Tensor::filled(&[50, 2], 1.0);
    let y = add_noise_snr(&x, 0.0, &WhiteNoise, &mut rng(2)).unwrap();
    let added: Vec<f64> = y.data().iter().map(|v| v - 1.0).collect();
    let p = added.iter().map(|v| v * v).sum::<f64>() / added.len() as f64;
    assert!((p - 1.0).abs() < 1e-6);
}

#[test]
fn noise_identities() {
    let x = random_features(8, 3, 9);
    assert_eq!(add_noise_snr(&x, f64::INFINITY, &WhiteNoise, &mut rng(0)).unwrap(), x);
    let z = Tensor::zeros(&[8, 3]);
    assert_eq!(add_noise_snr(&z, 10.0, &WhiteNoise, &mut rng(0)).unwrap(), z);
}

#[test]
fn file_noise_tiles_and_checks_dim() {
    let clip = random_features(3, 2, 4);
    let src = FileNoise::from_clips(vec![clip.clone()]).unwrap();
    let n = src.sample(7, 2, &mut rng(1)).unwrap();
    assert_eq!(n.rows(), 7);
    for t in 0..7 {
        assert!((0..3).any(|r| clip.row(r) == n.row(t)));
    }
    assert!(src.sample(4, 5, &mut rng(1)).is_err());
    let x = random_features(10, 2, 8);
    let y = add_noise_snr(&x, 12.0, &src, &mut rng(3)).unwrap();
    let noise = Tensor::new(vec![10, 2], y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect()).unwrap();
    assert!((snr_db(&x, &noise) - 12.0).abs() < 1e-6);
}

fn batch(b: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let features = (0..b)
        .map(|i| random_features(5 + i, 3, seed * 31 + i as u64))
        .collect();
    let mut onehot = Tensor::zeros(&[b, 7]);
    for i in 0..b {
        onehot.data_mut()[i * 7 + r.random_range(0..7)] = 1.0;
    }
    let present = (0..b).map(|i| i % 3 != 2).collect();
    Batch {
        features,
        cat_targets: smooth_labels(&onehot, 0.1).unwrap(),
        dim_targets: DimTargets::new(Tensor::uniform(&[b, 3], 0.0, 1.0, &mut r), present).unwrap(),
    }
}

#[test]
fn mixup_identity_at_one() {
    let b = batch(4, 1);
    let out = mixup_with(&b, 1.0, &[2, 0, 3, 1]).unwrap();
    assert_eq!(out.features, b.features);
    assert_eq!(out.cat_targets, b.cat_targets);
    assert_eq!(out.dim_targets.values, b.dim_targets.values);
}

#[test]
fn mixup_half_of_two_classes() {
    let mut t = Tensor::zeros(&[2, 7]);
    t.data_mut()[0] = 1.0;
    t.data_mut()[8] = 1.0;
    let b = Batch {
        features: vec![Tensor::zeros(&[2, 1]), Tensor::filled(&[2, 1], 2.0)],
        cat_targets: t,
        dim_targets: DimTargets::all_present(Tensor::zeros(&[2, 3])).unwrap(),
    };
    let out = mixup_with(&b, 0.5, &[1, 0]).unwrap();
    assert_eq!(out.cat_targets.row(0), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(out.features[0].data(), &[1.0, 1.0]);
}

proptest! {
    #[test]
    fn mixup_stays_on_simplex(seed in 0u64..10_000, lambda in 0.0f64..=1.0, b in 2usize..9) {
        let bt = batch(b, seed);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng(seed));
        let out = mixup_with(&bt, lambda, &perm).unwrap();
        for i in 0..b {
            let row = out.cat_targets.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(out.dim_targets.values.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(out.features[i].shape(), bt.features[i].shape());
            prop_assert_eq!(out.dim_targets.present[i], bt.dim_targets.present[i] && bt.dim_targets.present[perm[i]]);
        }
    }
}

#[test]
fn beta_mean() {
    let mut r = rng(2024);
    let n = 100_000;
    let mean = (0..n).map(|_| beta_sample(0.3, &mut r).unwrap()).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
}

#[test]
fn mixup_probability_and_single_row() {
    let cfg = AugmentConfig::default();
    let b = batch(4, 3);
    let mut r = rng(7);
    let hits = (0..2000)
        .filter(|_| mixup_batch(&b, &cfg, &mut r).unwrap().1.is_some())
        .count();
    assert!((hits as f64 / 2000.0 - 0.5).abs() < 0.05, "{hits}");
    let always = AugmentConfig {
        mixup_prob: 1.0,
        ..AugmentConfig::default()
    };
    let one = batch(1, 3);
    let (out, lambda) = mixup_batch(&one, &always, &mut r).unwrap();
    assert_eq!((out, lambda), (one, None));
}

#[test]
fn augmenter_is_keyed_by_sample() {
    let a = Augmenter::new(AugmentConfig::default(), 11).unwrap();
    let x = random_features(30, 4, 0);
    let first: Vec<Tensor> = ["u1", "u2", "u3"]
        .iter()
        .map(|id| a.augment_sample(&x, 2, id).unwrap())
        .collect();
    let again: Vec<Tensor> = ["u3", "u2", "u1"]
        .iter()
        .map(|id| a.augment_sample(&x, 2, id).unwrap())
        .collect();
    assert_eq!(first[0], again[2]);
    assert_eq!(first[2], again[0]);
    let off = Augmenter::new(AugmentConfig::disabled(), 11).unwrap();
    assert_eq!(off.augment_sample(&x, 0, "u1").unwrap(), x);
    assert_eq!(off.mixup(&batch(4, 0), 3).unwrap(), batch(4, 0));
    assert_eq!(off.applied(), 0);
}

#[test]
fn config_validation() {
    let bad = AugmentConfig {
        noise_snr_db: (20.0, 5.0),
        ..AugmentConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = AugmentConfig {
        mixup_alpha: 0.0,
        ..AugmentConfig::default()
    };
    assert!(bad.validate().is_err());
}
