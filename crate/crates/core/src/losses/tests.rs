use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::synth::{generate_synthetic_dataset, SynthConfig};
use crate::diffops::grad_check_in_mode;

fn random_image(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn frame(res: usize, seed: u64) -> FaceFrame {
    FaceFrame::new(random_image([1, 3, res, res], seed)).unwrap()
}

fn small_comparator(seed: u64) -> IdentityComparator {
    IdentityComparator::new(ComparatorConfig::standard(4), seed).unwrap()
}

#[test]
fn photometric_examples() {
    let a = random_image([2, 3, 8, 8], 1);
    assert_eq!(photometric_l1(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v + 0.1);
    assert!((photometric_l1(&a, &b).unwrap() - 0.1).abs() < 1e-6);

    let c = random_image([2, 3, 8, 8], 2);
    let mut brute = 0.0f64;
    for i in 0..a.len() {
        brute += (a.data()[i] as f64 - c.data()[i] as f64).abs();
    }
    assert!((photometric_l1(&a, &c).unwrap() - brute / a.len() as f64).abs() < 1e-12);

    let short = random_image([1, 3, 8, 8], 3);
    assert!(matches!(photometric_l1(&a, &short), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn photometric_is_homogeneous(seed in 0u64..1000, c in -4.0f32..4.0) {
        let a = random_image([1, 3, 4, 4], seed);
        let b = random_image([1, 3, 4, 4], seed + 1);
        let base = photometric_l1(&a, &b).unwrap();
        let scaled = photometric_l1(&a.map(|v| v * c), &b.map(|v| v * c)).unwrap();
        prop_assert!((scaled - c.abs() as f64 * base).abs() <= 1e-6 * (1.0 + base));
    }
}

#[test]
fn layer_names_round_trip() {
    for i in 0..N_STAGES {
        let l = Layer::from_stage(i);
        assert_eq!(l.to_string().parse::<Layer>().unwrap(), l);
    }
    assert_eq!(parse_layers(&["Conv2", "Conv7"]).unwrap(), vec![Layer::CONV2, Layer::CONV7]);
    for bad in ["Conv0", "Conv8", "conv3", "fc6", ""] {
        assert!(matches!(bad.parse::<Layer>(), Err(Error::UnknownLayer(_))), "{bad}");
    }
    let names: Vec<String> = LOW_HIGH.iter().map(|l| l.to_string()).collect();
    assert_eq!(names, ["Conv2", "Conv3", "Conv4", "Conv5", "Conv7"]);
    let names: Vec<String> = HIGH.iter().map(|l| l.to_string()).collect();
    assert_eq!(names, ["Conv6", "Conv7"]);
}

#[test]
fn standard_schedule() {
    let cfg = ComparatorConfig::default();
    let widths: Vec<usize> = cfg.stages.iter().map(|s| s.c_out).collect();
    assert_eq!(widths, [16, 32, 64, 128, 128, 128, 128]);
    let pools: Vec<bool> = cfg.stages.iter().map(|s| s.pool).collect();
    assert_eq!(pools, [true, false, true, false, true, false, true]);
    assert!(cfg.stages.iter().all(|s| s.kernel == 3));
    assert_eq!(cfg.stages[0].c_in, 3);
}

/// One 1x1 stage with weight 2 on the diagonal and zero bias.
fn doubling_stub() -> IdentityComparator {
    let cfg = ComparatorConfig {
        stages: vec![StageSpec {
            c_in: 3,
            c_out: 3,
            kernel: 1,
            pool: false,
        }],
    };
    let mut cmp = IdentityComparator::new(cfg, 0).unwrap();
    let w = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 2.0 } else { 0.0 });
    cmp.store_mut().assign("comparator.Conv1.weight", w).unwrap();
    cmp.store_mut().assign("comparator.Conv1.bias", Tensor::zeros([3, 1, 1, 1])).unwrap();
    cmp
}

#[test]
fn content_loss_examples() {
    let stub = doubling_stub();
    let ones = FaceFrame::new(Tensor::full([1, 3, 8, 8], 1.0)).unwrap();
    let zeros = FaceFrame::new(Tensor::zeros([1, 3, 8, 8])).unwrap();
    let out = content_loss(&stub, &ones, &zeros, &[Layer::CONV1]).unwrap();
    assert_eq!(out[&Layer::CONV1], 2.0);
    assert!(content_loss(&stub, &ones, &zeros, &[]).unwrap().is_empty());
    assert!(matches!(
        content_loss(&stub, &ones, &zeros, &[Layer::CONV2]),
        Err(Error::UnknownLayer(l)) if l == "Conv2"
    ));

    let cmp = small_comparator(4);
    let a = frame(16, 5);
    let all: Vec<Layer> = (0..N_STAGES).map(Layer::from_stage).collect();
    let same = content_loss(&cmp, &a, &a, &all).unwrap();
    assert_eq!(same.len(), N_STAGES);
    assert!(same.values().all(|&v| v == 0.0));
    let b = frame(16, 6);
    assert!(content_loss(&cmp, &a, &b, &all).unwrap().values().all(|&v| v >= 0.0));
}

#[test]
fn ema_arithmetic() {
    assert_eq!(ema_update(None, 2.0, 0.99), 2.0);
    assert!((ema_update(Some(1.0), 2.0, 0.99) - 1.01).abs() < 1e-12);
    assert_eq!(ema_update(Some(0.0), 0.0, 0.5), EMA_FLOOR);
}

fn triplet(res: usize, seed: u64) -> TripletSample {
    TripletSample {
        s_a: frame(res, seed),
        d_a: frame(res, seed + 1),
        d_r: frame(res, seed + 2),
    }
}

#[test]
fn perfect_generation_costs_nothing() {
    let cmp = small_comparator(7);
    let t = triplet(16, 10);
    let mut state = LossWeightState::default();
    let (total, parts) = stage2_loss(&t, &t.d_a, &t.s_a, &cmp, &mut state).unwrap();
    assert_eq!(total, 0.0);
    assert_eq!(parts.len(), 1 + LOW_HIGH.len() + HIGH.len());
    assert!(parts.values().all(|&v| v == 0.0));
    assert!(state.photometric.unwrap() > 0.0);
}

#[test]
fn fresh_state_equalizes_terms() {
    let cmp = small_comparator(8);
    let t = triplet(16, 20);
    let (g_da, g_dr) = (frame(16, 30), frame(16, 31));
    let mut state = LossWeightState::default();
    let (total, parts) = stage2_loss(&t, &g_da, &g_dr, &cmp, &mut state).unwrap();
    let photo = parts["photometric"];
    assert!(photo > 0.0);
    for l in LOW_HIGH {
        let v = parts[&format!("same.{l}")];
        assert!((v / photo - 1.0).abs() < 1e-5, "{l}: {v} vs {photo}");
    }
    for l in HIGH {
        let v = parts[&format!("diff.{l}")];
        assert!((v / photo - 0.1).abs() < 1e-5, "{l}: {v} vs {photo}");
    }
    let sum: f64 = parts.values().sum();
    assert!((sum - total).abs() < 1e-5 * total);
    assert!((total / photo - (1.0 + 5.0 + 0.2)).abs() < 1e-4);
}

#[test]
fn seeded_state_weights_are_the_target_ratios() {
    let state = LossWeightState::seeded(0.99, 3.0);
    for l in LOW_HIGH {
        assert_eq!(state.same_weight(l), 1.0);
    }
    for l in HIGH {
        assert!((state.diff_weight(l) - 0.1).abs() < 1e-15);
    }
}

#[test]
fn stationary_losses_hold_the_ratio() {
    let cmp = small_comparator(9);
    let t = triplet(16, 40);
    let (g_da, g_dr) = (frame(16, 50), frame(16, 51));
    // Averages start far from the observed magnitudes and converge.
    let mut state = LossWeightState::seeded(0.9, 5.0);
    let mut ratio = 0.0;
    for _ in 0..200 {
        let (_, parts) = stage2_loss(&t, &g_da, &g_dr, &cmp, &mut state).unwrap();
        ratio = parts["same.Conv3"] / parts["photometric"];
    }
    assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    assert!(state.same.values().chain(state.diff.values()).all(|&v| v > 0.0 && v.is_finite()));
}

#[test]
fn stage2_rejects_inconsistent_shapes() {
    let cmp = small_comparator(1);
    let t = triplet(16, 1);
    let mut state = LossWeightState::default();
    let small = frame(8, 2);
    assert!(matches!(stage2_loss(&t, &small, &t.s_a, &cmp, &mut state), Err(Error::Shape(_))));
    let bad = TripletSample { d_r: small, ..t.clone() };
    assert!(matches!(stage2_loss(&bad, &t.d_a, &t.s_a, &cmp, &mut state), Err(Error::Shape(_))));
    assert!(state.photometric.is_none());
}

#[test]
fn total_is_differentiable_in_generated_frames() {
    let cmp = IdentityComparator::<f32>::new(ComparatorConfig::standard(2), 3).unwrap().cast::<f64>();
    let params: Vec<Tensor<f64>> = cmp.store().params().map(|(_, t)| t.clone()).collect();
    let t = triplet(16, 60);
    let fixed = [t.s_a.tensor().cast::<f64>(), t.d_a.tensor().cast::<f64>()];
    let inputs = [frame(16, 70).tensor().cast::<f64>(), frame(16, 71).tensor().cast::<f64>()];
    // Decay 1 freezes the weights after seeding, so finite differences see
    // the same weighted objective as the analytic gradient.
    let mut seeded = LossWeightState::seeded(0.99, 1.0);
    seeded.photometric = Some(0.4);
    seeded.decay = 1.0;
    let report = grad_check_in_mode(false, &inputs, None, 1e-6, 1e-3, |g, vars| {
        let p: Vec<Var> = params.iter().map(|w| g.input(w.clone())).collect();
        let s = g.input(fixed[0].clone());
        let d = g.input(fixed[1].clone());
        let mut state = seeded.clone();
        stage2_graph(g, &cmp, &p, s, d, vars[0], vars[1], &mut state).unwrap().total
    });
    assert!(report.passed, "{report:?}");
}

#[test]
fn comparator_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cmp.bin");
    let cmp = small_comparator(11);
    cmp.save(&path).unwrap();
    let back = IdentityComparator::load(&path).unwrap();
    assert_eq!(back.config(), cmp.config());
    for ((na, a), (nb, b)) in cmp.store().all().zip(back.store().all()) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
    assert_eq!(&std::fs::read(&path).unwrap()[..8], COMPARATOR_MAGIC);

    let ckpt = dir.path().join("nets.bin");
    let cfg = crate::networks::NetConfig {
        resolution: 8,
        base_channels: 2,
        max_channels: 4,
        driving_vector_dim: 4,
    };
    let emb = crate::networks::EmbeddingNetwork::new(cfg, 0).unwrap();
    let drv = crate::networks::DrivingNetwork::new(cfg, 0).unwrap();
    crate::networks::save_checkpoint(&ckpt, &emb, &drv, &Default::default()).unwrap();
    assert!(matches!(IdentityComparator::load(&ckpt), Err(Error::BadMagic { .. })));
}

#[test]
fn comparator_training_is_deterministic_and_needs_two_identities() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic_dataset(&SynthConfig::new(5, 1, 10, 16, 2), dir.path(), false).unwrap();
    let cfg = ComparatorTrainConfig {
        base_channels: 2,
        steps: 4,
        batch_size: 4,
        ..Default::default()
    };
    let (a, ra) = train_identity_comparator(&index, &cfg, 5).unwrap();
    let (b, rb) = train_identity_comparator(&index, &cfg, 5).unwrap();
    assert_eq!(ra.n_classes, index.identities_in(crate::dataset::Split::Train).len());
    assert_eq!(ra.heldout_frames, ra.n_classes * 2);
    assert_eq!(ra.final_train_loss, rb.final_train_loss);
    for ((_, x), (_, y)) in a.store().all().zip(b.store().all()) {
        assert_eq!(x, y);
    }
    // The classifier head is not part of the comparator.
    assert!(a.store().params().all(|(n, _)| n.starts_with("comparator.Conv")));

    let one_dir = tempfile::tempdir().unwrap();
    let mut one = generate_synthetic_dataset(&SynthConfig::new(3, 1, 4, 8, 0), one_dir.path(), false).unwrap();
    one.identities.retain(|i| i.split == crate::dataset::Split::Train);
    assert!(matches!(train_identity_comparator(&one, &cfg, 0), Err(Error::Dataset(_))));
}
