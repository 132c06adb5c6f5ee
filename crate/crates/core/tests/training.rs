use ctnet_core::backbone::{ConvBlock, Network};
use ctnet_core::checkpoint;
use ctnet_core::data::{make_synthetic, split, Dataset, SplitSpec, SynthConfig};
use ctnet_core::eval::full_report;
use ctnet_core::mining::{SamplerConfig, Triplet};
use ctnet_core::trainer::{
    batch_objective, predict, read_history, resume, train, train_step, OptimizerKind, TrainConfig,
    TrainState, CHECKPOINT_LATEST, HISTORY_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        phase1_epochs: 1,
        image_size: (12, 12),
        conv_blocks: vec![ConvBlock::new(4, 3, 1, 2)],
        embedding_dim: 8,
        sampler: SamplerConfig {
            classes_per_batch: 3,
            samples_per_class: 2,
            ..SamplerConfig::default()
        },
        steps_per_epoch: Some(3),
        ..TrainConfig::default()
    }
}

fn splits() -> (Dataset, Dataset, Dataset) {
    let ds = make_synthetic(3, 20, 12, 12, 9, &SynthConfig::default()).unwrap();
    split(&ds, &SplitSpec::with_seed(9)).unwrap()
}

fn descends(mut config: TrainConfig, phase1: bool) {
    config.learning_rate = 1e-6;
    config.phase1_learning_rate = 1e-6;
    config.phase1_epochs = if phase1 { 1 } else { 0 };
    config.optimizer_phase1 = OptimizerKind::Sgd;
    let (train_ds, _, _) = splits();
    let mut state = TrainState::new(config, 3, train_ds.class_names().to_vec()).unwrap();
    let members = train_ds.class_indices();
    let picked: Vec<usize> = members.iter().flat_map(|m| m[..2].to_vec()).collect();
    let mut batch = train_ds.batch(&picked).unwrap();
    batch.triplets = vec![
        Triplet::new(0, 1, 2),
        Triplet::new(2, 3, 4),
        Triplet::new(4, 5, 0),
    ];
    let rng = || ChaCha8Rng::seed_from_u64(77);
    let before = batch_objective(&state, &batch, &mut rng()).unwrap();
    let step = train_step(&mut state, &batch, &mut rng()).unwrap();
    assert_eq!(step.loss, before);
    assert!(step.grad_norm > 0.0);
    let after = batch_objective(&state, &batch, &mut rng()).unwrap();
    assert!(after <= before + 1e-9, "{after} > {before}");
    assert!(after < before, "no progress at all: {after} == {before}");
}

#[test]
fn small_step_descends_in_both_phases() {
    descends(small_config(), true);
    descends(small_config(), false);
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let (tr, va, _) = splits();
    let a = train(&tr, &va, &small_config(), None).unwrap();
    let b = train(&tr, &va, &small_config(), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 3);

    let other = TrainConfig {
        seed: 1,
        ..small_config()
    };
    assert_ne!(train(&tr, &va, &other, None).unwrap().network, a.network);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (tr, va, _) = splits();
    let dir = tempfile::tempdir().unwrap();
    let full = train(&tr, &va, &small_config(), Some(dir.path())).unwrap();

    for stop in 1..=2 {
        let partial = checkpoint::load(&dir.path().join(format!("epoch_{stop:03}.ckpt"))).unwrap();
        assert_eq!(partial.epoch, stop);
        let resumed = resume(partial, &tr, &va, None).unwrap();
        assert_eq!(resumed, full, "resumed after epoch {stop}");
    }

    let latest = checkpoint::load(&dir.path().join(CHECKPOINT_LATEST)).unwrap();
    assert_eq!(latest, full);
    assert_eq!(
        read_history(&dir.path().join(HISTORY_FILE)).unwrap(),
        full.history
    );
}

#[test]
fn checkpoint_preserves_forward_outputs() {
    let (tr, va, te) = splits();
    let state = train(&tr, &va, &small_config(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.ckpt");
    checkpoint::save(&path, &state).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let (p0, e0) = predict(&state.network, te.images()).unwrap();
    let (p1, e1) = predict(&loaded.network, te.images()).unwrap();
    assert_eq!(p0.data(), p1.data());
    assert_eq!(e0.data(), e1.data());
    // Saving the loaded state reproduces the same bytes.
    assert_eq!(
        checkpoint::encode(&loaded).unwrap(),
        std::fs::read(&path).unwrap()
    );
}

#[test]
fn degenerate_phase_schedules_are_legal() {
    let (tr, va, _) = splits();
    let base = TrainConfig {
        epochs: 2,
        ..small_config()
    };
    let only_classifier = TrainConfig {
        phase1_epochs: 2,
        ..base.clone()
    };
    let only_joint = TrainConfig {
        phase1_epochs: 0,
        ..base
    };

    let init = Network::init(only_classifier.backbone(3, 3), only_classifier.seed).unwrap();
    let a = train(&tr, &va, &only_classifier, None).unwrap();
    assert_eq!(a.history.len(), 2);
    for ((name, before), (_, after)) in init.params().iter().zip(a.network.params()) {
        if name.starts_with("embedding.") {
            assert_eq!(before, after, "{name} moved during the classifier phase");
        }
    }
    let b = train(&tr, &va, &only_joint, None).unwrap();
    assert_eq!(b.history.len(), 2);
    assert_eq!(b.optimizer.kind(), OptimizerKind::Sgd);
}

#[test]
fn untrained_network_is_at_chance() {
    let ds = make_synthetic(4, 50, 16, 16, 3, &SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        image_size: (16, 16),
        ..TrainConfig::default()
    };
    let seeds = 0..8u64;
    let mean = seeds
        .clone()
        .map(|seed| {
            let net = Network::init(cfg.backbone(3, 4), seed).unwrap();
            full_report(&net, &ds, None).unwrap().overall_accuracy
        })
        .sum::<f64>()
        / seeds.count() as f64;
    assert!((mean - 0.25).abs() <= 0.1, "untrained accuracy {mean}");
}
