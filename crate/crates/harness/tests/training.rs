use clfseg_core::Tensor;
use clfseg_data::synth;
use clfseg_harness::checkpoint::Checkpoint;
use clfseg_harness::config::TrainConfig;
use clfseg_harness::train::{self, Control, Datasets, LOG_HEADER};
use clfseg_harness::HarnessError;
use proptest::prelude::*;

fn tiny() -> TrainConfig {
    TrainConfig {
        base_filters: 4,
        depth: 2,
        height: 16,
        width: 16,
        learning_rate: 1e-3,
        epochs: 1,
        synth_count: 4,
        synth_val_count: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, dir: &std::path::Path) -> train::TrainOutcome {
    let data = train::load_datasets(cfg).unwrap();
    train::train(cfg, &data, Some(dir), None, &mut |_| Control::Continue).unwrap()
}

#[test]
fn one_epoch_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&tiny(), dir.path());
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.trainer.step, 1);
    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split('\t').count(), 4);
    let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.epoch, 1);
    assert!(dir.path().join("best.ckpt").exists());
    assert_eq!(TrainConfig::load(&dir.path().join("config.toml")).unwrap(), tiny());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let two = TrainConfig { epochs: 2, ..tiny() };
    let a = tempfile::tempdir().unwrap();
    run(&two, a.path());

    let b = tempfile::tempdir().unwrap();
    run(&tiny(), b.path());
    let ckpt = Checkpoint::load(&b.path().join("last.ckpt")).unwrap();
    let data = train::load_datasets(&two).unwrap();
    train::train(&two, &data, Some(b.path()), Some(ckpt), &mut |_| Control::Continue).unwrap();

    for f in ["train.log", "last.ckpt", "best.ckpt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_rejects_other_networks() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(), dir.path());
    let ckpt = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    let other = TrainConfig { base_filters: 6, ..tiny() };
    let data = train::load_datasets(&other).unwrap();
    let err = train::train(&other, &data, None, Some(ckpt), &mut |_| Control::Continue)
        .err()
        .unwrap();
    assert!(err.to_string().contains("base_filters: 4 != 6"), "{err}");
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(), dir.path());
    let path = dir.path().join("last.ckpt");
    let before = std::fs::read(&path).unwrap();

    let mut poisoned = Checkpoint::load(&path).unwrap();
    let k = poisoned.params.get_mut("head.kernel").unwrap();
    *k = Tensor::full(k.shape(), f64::NAN);
    let cfg = TrainConfig { epochs: 2, ..tiny() };
    let data = train::load_datasets(&cfg).unwrap();
    let err = train::train(&cfg, &data, Some(dir.path()), Some(poisoned), &mut |_| Control::Continue)
        .err()
        .unwrap();
    assert!(matches!(err, HarnessError::NonFiniteLoss { epoch: 1, .. }), "{err}");
    assert_eq!(std::fs::read(&path).unwrap(), before);
    Checkpoint::load(&path).unwrap();
}

#[test]
fn observer_can_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 1, ..tiny() };
    let data = train::load_datasets(&cfg).unwrap();
    let out = train::train(&cfg, &data, Some(dir.path()), None, &mut |p| {
        if p.step == 6 {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .unwrap();
    assert!(out.interrupted);
    assert_eq!(out.trainer.step, 6);
    assert_eq!(out.log.len(), 2);
    let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.step, 6);
}

#[test]
fn max_steps_limits_training() {
    let cfg = TrainConfig { epochs: 100, batch_size: 1, max_steps: 3, ..tiny() };
    let data = train::load_datasets(&cfg).unwrap();
    let out = train::train(&cfg, &data, None, None, &mut |_| Control::Continue).unwrap();
    assert_eq!(out.trainer.step, 3);
    assert_eq!(out.log.len(), 1);
}

#[test]
fn empty_training_set_is_an_error() {
    let data = Datasets {
        train: Vec::new(),
        val: Vec::new(),
        split: None,
    };
    assert!(matches!(
        train::train(&tiny(), &data, None, None, &mut |_| Control::Continue),
        Err(HarnessError::EmptyDataset)
    ));
}

#[test]
fn directory_datasets_are_split_and_recorded() {
    let data_dir = tempfile::tempdir().unwrap();
    clfseg_data::io::write_dataset(data_dir.path(), &synth::synth_dataset(10, 16, 2, 0.5)).unwrap();
    let cfg = TrainConfig {
        data_dir: Some(data_dir.path().to_path_buf()),
        ..tiny()
    };
    let data = train::load_datasets(&cfg).unwrap();
    assert_eq!((data.train.len(), data.val.len()), (8, 1));
    let out = tempfile::tempdir().unwrap();
    train::train(&cfg, &data, Some(out.path()), None, &mut |_| Control::Continue).unwrap();
    let manifest = std::fs::read_to_string(out.path().join("split.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
}

#[test]
fn augmented_batches_depend_only_on_seed_and_epoch() {
    let cfg = TrainConfig { batch_size: 3, ..tiny() };
    let data = train::load_datasets(&cfg).unwrap();
    let a = train::epoch_batches(&cfg, &data.train, 4);
    assert_eq!(a, train::epoch_batches(&cfg, &data.train, 4));
    assert_ne!(a, train::epoch_batches(&cfg, &data.train, 5));
    assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 1]);
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_exactly(
        lr in finite(), decay in finite(), eps in finite(), diff in finite(),
        seed in 0..=i64::MAX as u64, batch in 1usize..64, epochs in any::<u32>(), paths in 1usize..4,
        fuzzy in any::<bool>(), augment in any::<bool>(), dir in prop::option::of("[a-z]{1,8}"),
    ) {
        let c = TrainConfig {
            learning_rate: lr,
            rmsprop_decay: decay,
            rmsprop_eps: eps,
            synth_difficulty: diff,
            seed,
            batch_size: batch,
            epochs: epochs as u64,
            resnet_paths: paths,
            fuzzy,
            augment,
            data_dir: dir.map(Into::into),
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }
}
