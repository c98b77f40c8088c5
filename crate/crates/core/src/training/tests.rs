use super::*;
use crate::data::{synthetic_dataset, SyntheticConfig, SyntheticMode, SplitName};
use crate::model::Network;

fn tiny_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        width: 8,
        max_episodes: 6,
        eval_every: 3,
        val_episodes: 4,
        queries_per_class: 2,
        val_queries_per_class: 2,
        way: 3,
        seed: 5,
        workers: 1,
        ..TrainConfig::new(kind)
    }
}

fn splits() -> (DatasetSplit, DatasetSplit) {
    let train = synthetic_dataset(5, 4, 16, SyntheticMode::Separable, 1).unwrap();
    let val = SyntheticConfig::new(4, 4, 16, SyntheticMode::Separable, 1)
        .with_split(SplitName::Val, 5)
        .generate()
        .unwrap();
    (train, val)
}

#[test]
fn schedule_halves_on_period_boundaries() {
    let c = TrainConfig::new(ModelKind::Baseline);
    assert_eq!(lr_schedule(0, &c), 0.001);
    assert_eq!(lr_schedule(99_999, &c), 0.001);
    assert_eq!(lr_schedule(100_000, &c), 0.0005);
    assert_eq!(lr_schedule(250_000, &c), 0.00025);
}

#[test]
fn defaults_follow_the_training_setup() {
    let b = TrainConfig::new(ModelKind::Baseline);
    let x = TrainConfig::new(ModelKind::CrossMod);
    assert_eq!((b.queries_per_class, x.queries_per_class), (15, 5));
    assert_eq!((b.lr_initial, b.l1_factor, b.lr_halving_period), (0.001, 0.001, 100_000));
    assert_eq!((b.eval_every, b.val_episodes), (5000, 200));
    b.validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = TrainConfig::new(ModelKind::Baseline);
    c.way = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = TrainConfig::new(ModelKind::Baseline);
    c.l1_factor = -1.0;
    assert!(c.validate().is_err());
}

#[test]
fn uniform_prediction_loss_is_ln_way() {
    // Identical images give identical similarities, hence uniform votes.
    let split = synthetic_dataset(5, 2, 16, SyntheticMode::Separable, 1).unwrap();
    let mut ep = episode_at(&split, EpisodeSpec { way: 5, shot: 1, queries_per_class: 1 }, 0, 0).unwrap();
    let img = ep.support[0].image.clone();
    for e in ep.support.iter_mut().chain(ep.query.iter_mut()) {
        e.image = img.clone();
    }
    let net = Network::<f64>::new(ModelKind::Baseline, 4, 1);
    let loss = episode_loss(&net, &ep, 0.0).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-9);
}

#[test]
fn penalty_is_l1_of_post_multipliers_only() {
    let split = synthetic_dataset(3, 2, 16, SyntheticMode::Separable, 1).unwrap();
    let ep = episode_at(&split, EpisodeSpec { way: 3, shot: 1, queries_per_class: 1 }, 0, 0).unwrap();
    let base = Network::<f64>::new(ModelKind::Baseline, 4, 1);
    assert_eq!(episode_loss(&base, &ep, 0.0).unwrap(), episode_loss(&base, &ep, 5.0).unwrap());

    let mut net = Network::<f64>::new(ModelKind::CrossMod, 4, 1);
    let plain = episode_loss(&net.with_modulation_gated_off(), &ep, 0.0).unwrap();
    assert_eq!(episode_loss(&net, &ep, 3.0).unwrap(), plain, "zero post-multipliers carry no penalty");
    // Tiny post-multipliers barely move the likelihood; the penalty is exact.
    net.generators_mut()[1].gamma0.data_mut()[0] = -1e-9;
    net.generators_mut()[2].beta0.data_mut()[3] = 2e-9;
    let with = episode_loss(&net, &ep, 1e6).unwrap();
    assert!((with - plain - 1e6 * 3e-9).abs() < 1e-6);
}

#[test]
fn gate_invariant_carries_through_first_loss() {
    let split = synthetic_dataset(5, 3, 16, SyntheticMode::Pairwise, 1).unwrap();
    let ep = episode_at(&split, EpisodeSpec { way: 5, shot: 1, queries_per_class: 2 }, 2, 0).unwrap();
    let x = Network::<f32>::new(ModelKind::CrossMod, 8, 3);
    let b = x.baseline_part();
    let lx = episode_loss(&x, &ep, 0.0).unwrap();
    let lb = episode_loss(&b, &ep, 0.0).unwrap();
    assert!((lx - lb).abs() < 1e-6);
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let (train_split, val) = splits();
    let config = tiny_config(ModelKind::CrossMod);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let opts = TrainOptions {
            output_dir: Some(d.path().to_path_buf()),
            resume: false,
        };
        train(&config, &train_split, Some(&val), &opts).unwrap();
    }
    let log1 = fs::read(d1.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log1, fs::read(d2.path().join(TRAIN_LOG)).unwrap());
    let text = String::from_utf8(log1).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text.lines().filter(|l| l.contains("val_acc")).count(), 2);
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, OPTIMIZER_STATE] {
        assert!(d1.path().join(f).is_file(), "{f}");
    }
    let last = Network::<f32>::load(&d1.path().join(LAST_CHECKPOINT)).unwrap();
    assert!(last.blocks().iter().all(|b| b.running.is_some()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (train_split, val) = splits();
    let full_dir = tempfile::tempdir().unwrap();
    let part_dir = tempfile::tempdir().unwrap();
    let config = tiny_config(ModelKind::Baseline);
    let full = train(
        &config,
        &train_split,
        Some(&val),
        &TrainOptions {
            output_dir: Some(full_dir.path().to_path_buf()),
            resume: false,
        },
    )
    .unwrap();

    let mut first = config.clone();
    first.max_episodes = 3;
    train(
        &first,
        &train_split,
        Some(&val),
        &TrainOptions {
            output_dir: Some(part_dir.path().to_path_buf()),
            resume: false,
        },
    )
    .unwrap();
    let resumed = train(
        &config,
        &train_split,
        Some(&val),
        &TrainOptions {
            output_dir: Some(part_dir.path().to_path_buf()),
            resume: true,
        },
    )
    .unwrap();
    assert_eq!(resumed.episodes_run, 3);
    assert_eq!(resumed.network, full.network);
    assert_eq!(
        fs::read(full_dir.path().join(TRAIN_LOG)).unwrap(),
        fs::read(part_dir.path().join(TRAIN_LOG)).unwrap()
    );
}

#[test]
fn nan_loss_surfaces_as_error() {
    let (train_split, _) = splits();
    let mut config = tiny_config(ModelKind::Baseline);
    config.lr_initial = f64::MAX;
    // The first update is finite-but-huge; later steps overflow.
    let r = train(&config, &train_split, None, &TrainOptions::default());
    assert!(r.is_err());
}
