use super::*;
use crate::dataset::synth::{generate_synthetic_dataset, SynthConfig};
use crate::losses::ComparatorConfig;
use crate::networks::{load_checkpoint, NetConfig};

fn scalar(v: f32) -> Tensor<f32> {
    Tensor::full([1, 1, 1, 1], v)
}

#[test]
fn momentum_hand_example() {
    let mut theta = vec![scalar(0.0)];
    let mut v = vec![scalar(0.0)];
    let g = vec![Some(scalar(1.0))];
    sgd_momentum_step(theta.iter_mut(), &g, &mut v, 0.1, 0.9).unwrap();
    assert!((theta[0].data()[0] + 0.1).abs() < 1e-7);
    assert_eq!(v[0].data()[0], 1.0);
    sgd_momentum_step(theta.iter_mut(), &g, &mut v, 0.1, 0.9).unwrap();
    assert!((theta[0].data()[0] + 0.29).abs() < 1e-6);
    assert!((v[0].data()[0] - 1.9).abs() < 1e-6);
}

#[test]
fn momentum_degenerate_cases() {
    let mut theta = vec![scalar(0.5)];
    let mut v = vec![scalar(0.0)];
    sgd_momentum_step(theta.iter_mut(), &[Some(scalar(0.0))], &mut v, 0.1, 0.9).unwrap();
    assert_eq!(theta[0].data()[0], 0.5);
    sgd_momentum_step(theta.iter_mut(), &[None], &mut v, 0.1, 0.9).unwrap();
    assert_eq!(theta[0].data()[0], 0.5);

    for _ in 0..3 {
        sgd_momentum_step(theta.iter_mut(), &[Some(scalar(2.0))], &mut v, 0.1, 0.0).unwrap();
    }
    assert!((theta[0].data()[0] - (0.5 - 3.0 * 0.2)).abs() < 1e-6);

    let before = theta.clone();
    let err = sgd_momentum_step(theta.iter_mut(), &[Some(scalar(f32::NAN))], &mut v, 0.1, 0.9);
    assert!(matches!(err, Err(Error::NonFinite(_))));
    assert_eq!(theta, before);
    let err = sgd_momentum_step(theta.iter_mut(), &[], &mut v, 0.1, 0.9);
    assert!(matches!(err, Err(Error::Shape(_))));
}

#[test]
fn plateau_examples() {
    let cfg = PlateauConfig::default();
    let falling: Vec<f64> = (0..10).map(|i| 1.0 - 0.05 * i as f64).collect();
    assert_eq!(lr_plateau_step(&falling, 1e-3, &cfg), 1e-3);
    let flat = [1.0, 0.999, 0.9985, 0.9984, 0.9983, 0.9982];
    assert!((lr_plateau_step(&flat, 1e-3, &cfg) - 1e-4).abs() < 1e-18);
    assert_eq!(lr_plateau_step(&flat, cfg.lr_floor, &cfg), cfg.lr_floor);
    assert_eq!(lr_plateau_step(&flat, 5e-6, &cfg), cfg.lr_floor);
    // Too short to have a prior best.
    assert_eq!(lr_plateau_step(&flat[..5], 1e-3, &cfg), 1e-3);
    // Exactly 1% is not enough; more is.
    assert_eq!(lr_plateau_step(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.99], 1.0, &cfg), 0.1);
    assert_eq!(lr_plateau_step(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.989], 1.0, &cfg), 1.0);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut grads = vec![Some(scalar(3.0)), None, Some(scalar(4.0))];
    assert_eq!(clip_global_norm(&mut grads, 10.0), 5.0);
    assert_eq!(grads[0].as_ref().unwrap().data()[0], 3.0);
    assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
    let a = grads[0].as_ref().unwrap().data()[0];
    let b = grads[2].as_ref().unwrap().data()[0];
    assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-6);
}

#[test]
fn config_files_fill_stage_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"stage": 2, "max_steps": 7}"#).unwrap();
    let cfg = TrainConfig::from_json_file(&path).unwrap();
    assert_eq!((cfg.stage, cfg.lr, cfg.max_steps, cfg.momentum), (2, 1e-4, 7, 0.9));
    std::fs::write(&path, r#"{"batch_size": 3}"#).unwrap();
    let cfg = TrainConfig::from_json_file(&path).unwrap();
    assert_eq!((cfg.stage, cfg.lr, cfg.batch_size), (1, 1e-3, 3));
    std::fs::write(&path, r#"{"momentum": 1.0}"#).unwrap();
    assert!(matches!(TrainConfig::from_json_file(&path), Err(Error::Config(_))));
    assert_eq!(TrainConfig::stage2().lr, 0.0001);
    assert_eq!(TrainConfig::stage1().plateau, PlateauConfig::default());
}

fn tiny_net() -> NetConfig {
    NetConfig {
        resolution: 16,
        base_channels: 4,
        max_channels: 16,
        driving_vector_dim: 8,
    }
}

fn tiny_data(dir: &Path) -> DatasetIndex {
    generate_synthetic_dataset(&SynthConfig::new(5, 1, 6, 16, 1), dir, false).unwrap()
}

fn quick(stage: u8, steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        eval_every: 2,
        val_samples: 4,
        batch_size: 2,
        checkpoint_every: 3,
        ..TrainConfig::for_stage(stage)
    }
}

fn tensors(store: &ParamStore) -> Vec<Tensor<f32>> {
    store.all().map(|(_, t)| t.clone()).collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let index = tiny_data(&dir.path().join("data"));
    let mut emb = EmbeddingNetwork::new(tiny_net(), 1).unwrap();
    let mut drv = DrivingNetwork::new(tiny_net(), 2).unwrap();
    let (e0, d0) = (tensors(emb.store()), tensors(drv.store()));
    let cfg = TrainConfig { lr: 0.0, ..quick(1, 6) };
    let out = train_stage1(&cfg, &index, &mut emb, &mut drv, &dir.path().join("run")).unwrap();
    assert_eq!(tensors(emb.store()), e0);
    assert_eq!(tensors(drv.store()), d0);
    assert_eq!(out.val_history.len(), 4);
    assert!(out.val_history.iter().all(|&(_, v)| v == out.initial_val_l1));
}

#[test]
fn runs_are_reproducible_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let index = tiny_data(&dir.path().join("data"));
    let run = |name: &str| {
        let mut emb = EmbeddingNetwork::new(tiny_net(), 1).unwrap();
        let mut drv = DrivingNetwork::new(tiny_net(), 2).unwrap();
        let out = train_stage1(&quick(1, 5), &index, &mut emb, &mut drv, &dir.path().join(name)).unwrap();
        (
            std::fs::read(&out.metrics).unwrap(),
            std::fs::read(&out.checkpoint).unwrap(),
            out,
            emb,
        )
    };
    let (ma, ca, out, emb) = run("a");
    let (mb, cb, _, _) = run("b");
    assert_eq!(ma, mb);
    assert_eq!(ca, cb);

    let records: Vec<serde_json::Value> = std::str::from_utf8(&ma)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let evals: Vec<_> = records.iter().filter(|r| r["kind"] == "eval").collect();
    assert_eq!(evals.iter().map(|r| r["step"].as_u64().unwrap()).collect::<Vec<_>>(), [0, 2, 4, 5]);
    for r in &evals[1..] {
        assert!(r["lr"].as_f64().is_some() && r["val_l1"].as_f64().is_some());
        assert!(r["train"]["photometric"].as_f64().is_some());
    }

    let ck = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!((ck.meta.stage, ck.meta.step, ck.meta.seed), (1, 5, 0));
    assert_eq!(tensors(ck.embedding.store()), tensors(emb.store()));
    assert_eq!(out.steps, 5);
}

#[test]
fn validation_leaves_running_statistics_alone() {
    let dir = tempfile::tempdir().unwrap();
    let index = tiny_data(dir.path());
    let cache = FrameCache::load(&index, &[Split::Val]).unwrap();
    let emb = EmbeddingNetwork::new(tiny_net(), 1).unwrap();
    let drv = DrivingNetwork::new(tiny_net(), 2).unwrap();
    let pairs = validation_pairs(&index, &quick(1, 1)).unwrap();
    let (e0, d0) = (tensors(emb.store()), tensors(drv.store()));
    let a = validation_l1(&emb, &drv, &cache, &pairs, 3).unwrap();
    let b = validation_l1(&emb, &drv, &cache, &pairs, 2).unwrap();
    assert!((a - b).abs() < 1e-9);
    assert_eq!(tensors(emb.store()), e0);
    assert_eq!(tensors(drv.store()), d0);
}

#[test]
fn stage2_logs_every_identity_term() {
    let dir = tempfile::tempdir().unwrap();
    let index = tiny_data(&dir.path().join("data"));
    let mut emb = EmbeddingNetwork::new(tiny_net(), 1).unwrap();
    let mut drv = DrivingNetwork::new(tiny_net(), 2).unwrap();
    let cmp = IdentityComparator::new(ComparatorConfig::standard(2), 3).unwrap();
    let cfg = quick(2, 2);
    assert!(matches!(
        train(&cfg, &index, &mut emb, &mut drv, None, dir.path()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train_stage1(&cfg, &index, &mut emb, &mut drv, dir.path()),
        Err(Error::Config(_))
    ));
    let out = train_stage2(&cfg, &index, &mut emb, &mut drv, &cmp, &dir.path().join("run")).unwrap();
    let log = std::fs::read_to_string(&out.metrics).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let train = last["train"].as_object().unwrap();
    let mut keys: Vec<&str> = train.keys().map(String::as_str).filter(|k| *k != "total").collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "diff.Conv6",
            "diff.Conv7",
            "photometric",
            "same.Conv2",
            "same.Conv3",
            "same.Conv4",
            "same.Conv5",
            "same.Conv7"
        ]
    );
    assert_eq!(load_checkpoint(&out.checkpoint).unwrap().meta.lr, 0.0001);
}

#[test]
fn resolution_must_match_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let index = tiny_data(&dir.path().join("data"));
    let cfg = NetConfig {
        resolution: 32,
        ..tiny_net()
    };
    let mut emb = EmbeddingNetwork::new(cfg, 1).unwrap();
    let mut drv = DrivingNetwork::new(cfg, 2).unwrap();
    assert!(matches!(
        train_stage1(&quick(1, 1), &index, &mut emb, &mut drv, &dir.path().join("run")),
        Err(Error::ResolutionMismatch { expected: 32, .. })
    ));
}
