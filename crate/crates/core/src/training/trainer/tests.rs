use super::*;
use crate::datapipe::synth::{synth_samples, SynthConfig};
use crate::model::ModelConfig;
use crate::training::AugmentConfig;

#[test]
fn early_stop_arithmetic() {
    let mut s = EarlyStopper::new(3);
    let losses = [1.0, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3];
    let stopped = losses.iter().position(|&l| {
        s.observe(l);
        s.should_stop()
    });
    assert_eq!(stopped.map(|i| i + 1), Some(5));
    assert_eq!(s.best(), 0.8);
    let mut s = EarlyStopper::new(3);
    assert!(!(0..20).any(|i| {
        s.observe(1.0 / (i + 1) as f64);
        s.should_stop()
    }));
}

#[test]
fn equal_loss_is_not_improvement() {
    let mut s = EarlyStopper::new(2);
    assert!(s.observe(0.5));
    assert!(!s.observe(0.5));
    assert!(!s.observe(0.5));
    assert!(s.should_stop());
}

fn tiny_config(seed: u64, epochs: u32) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        model: ModelConfig::small(seed),
        ..RunConfig::default()
    };
    cfg.optim.epochs = epochs;
    cfg.data.batch_size = 4;
    cfg
}

fn sets(seed: u64) -> (Dataset, Dataset) {
    let base = SynthConfig {
        n_per_class: 2,
        frames: 16,
        seed,
        ..SynthConfig::default()
    };
    let dev = SynthConfig {
        n_per_class: 1,
        id_prefix: "dev_".into(),
        ..base.clone()
    };
    (
        Dataset::from_samples(synth_samples(&base).unwrap()),
        Dataset::from_samples(synth_samples(&dev).unwrap()),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn loop_writes_run_directory_deterministically() {
    let (train, dev) = sets(4);
    let cfg = tiny_config(4, 3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = train_loop(&cfg, &train, &dev, a.path()).unwrap();
    let sb = train_loop(&cfg, &train, &dev, b.path()).unwrap();
    assert_eq!(sa, sb);
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "checkpoints/epoch_001.serc",
            "checkpoints/epoch_002.serc",
            "checkpoints/epoch_003.serc",
            "config.toml",
            "epochs.csv",
            "train_log.csv",
            "train_state.json"
        ]
    );
    assert_eq!(fa, fb);

    assert_eq!(sa.global_step, 3 * 4);
    assert_eq!(read_state(a.path()).unwrap(), sa);
    assert_eq!(RunConfig::load(&a.path().join(CONFIG_FILE)).unwrap(), cfg);
    let log = fs::read_to_string(a.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1 + 12);

    let epochs = fs::read_to_string(a.path().join(EPOCH_LOG)).unwrap();
    let best: Vec<f64> = epochs
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));

    for h in &sa.history {
        let ck = Checkpoint::load(&a.path().join(&h.path)).unwrap();
        assert_eq!(ck.meta.epoch, h.epoch);
        let model = ck.to_model(&cfg.model).unwrap();
        let again = dev_cat_loss(&model, &dev.samples, &sa.class_weights).unwrap();
        assert!((again - h.dev_cat_loss).abs() < 1e-9);
    }
}

#[test]
fn different_seeds_differ() {
    let (train, dev) = sets(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_loop(&tiny_config(1, 1), &train, &dev, a.path()).unwrap();
    train_loop(&tiny_config(2, 1), &train, &dev, b.path()).unwrap();
    let ck = |d: &Path| fs::read(d.join("checkpoints/epoch_001.serc")).unwrap();
    assert_ne!(ck(a.path()), ck(b.path()));
}

#[test]
fn overlap_and_empty_sets_rejected() {
    let (train, dev) = sets(0);
    let cfg = tiny_config(0, 1);
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(
        train_loop(&cfg, &train, &train, d.path()),
        Err(SerError::Validation(_))
    ));
    assert!(matches!(
        train_loop(&cfg, &Dataset::default(), &dev, d.path()),
        Err(SerError::EmptyInput(_))
    ));
}

#[test]
fn lock_blocks_second_writer() {
    let d = tempfile::tempdir().unwrap();
    let lock = RunLock::acquire(d.path()).unwrap();
    let (train, dev) = sets(0);
    assert!(matches!(
        train_loop(&tiny_config(0, 1), &train, &dev, d.path()),
        Err(SerError::Validation(m)) if m.contains("locked")
    ));
    drop(lock);
    assert!(!d.path().join(".lock").exists());
}

#[test]
fn dev_evaluation_never_augments() {
    let (train, dev) = sets(2);
    let mut cfg = tiny_config(2, 1);
    cfg.augment = AugmentConfig {
        mixup_prob: 1.0,
        noise_prob: 1.0,
        speed_prob: 1.0,
        ..AugmentConfig::default()
    };
    let model = Model::new(cfg.model.clone()).unwrap();
    let mut t = Trainer::new(model, &cfg, cfg.loss.clone(), 10).unwrap();
    let batch: Vec<&Sample> = train.samples.iter().take(4).collect();
    t.train_step(&batch, 1).unwrap();
    let applied = t.augmenter.applied();
    assert_eq!(applied, 4 * 2 + 1);
    dev_cat_loss(&t.model, &dev.samples, &cfg.loss.class_weights).unwrap();
    assert_eq!(t.augmenter.applied(), applied);
}

#[test]
fn frozen_weights_survive_training() {
    let (train, _) = sets(3);
    let cfg = tiny_config(3, 1);
    let model = Model::new(cfg.model.clone()).unwrap();
    let before = model.clone();
    let mut t = Trainer::new(model, &cfg, cfg.loss.clone(), 100).unwrap();
    let batch: Vec<&Sample> = train.samples.iter().step_by(2).take(3).collect();
    for _ in 0..20 {
        t.train_step(&batch, 1).unwrap();
    }
    let mut changed = 0;
    for (name, p) in before.params().iter() {
        let now = t.model.params().tensor(name).unwrap();
        let same = p
            .value
            .data()
            .iter()
            .zip(now.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if p.trainable() {
            changed += usize::from(!same);
        } else {
            assert!(same, "{name} moved");
        }
    }
    assert!(changed > 0);
}

#[test]
fn step_errors_carry_step_index() {
    let cfg = tiny_config(0, 1);
    let model = Model::new(cfg.model.clone()).unwrap();
    let mut t = Trainer::new(model, &cfg, cfg.loss.clone(), 10).unwrap();
    match t.train_step(&[], 1) {
        Err(SerError::AtStep { step: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
}
