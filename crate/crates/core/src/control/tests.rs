use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::networks::{drive_decode, NetConfig};

fn affine(out: usize, inp: usize, w: &[f64], b: &[f64]) -> Affine {
    Affine::new(out, inp, w.to_vec(), b.to_vec()).unwrap()
}

fn rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn dv(v: &[f64]) -> DrivingVector {
    DrivingVector(v.iter().map(|&x| x as f32).collect())
}

#[test]
fn predict_pose_examples() {
    let m = VecToPoseMap {
        affine: affine(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0], &[0.0, 0.0, 1.0]),
    };
    assert_eq!(predict_pose(&m, &[2.0, 3.0]).unwrap(), [2.0, 6.0, 6.0]);
    let zero = VecToPoseMap {
        affine: affine(3, 4, &[0.0; 12], &[0.5, -1.0, 2.0]),
    };
    assert_eq!(predict_pose(&zero, &[9.0, 8.0, 7.0, 6.0]).unwrap(), [0.5, -1.0, 2.0]);
    let eye = VecToPoseMap {
        affine: affine(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[0.0; 3]),
    };
    assert_eq!(predict_pose(&eye, &[0.1, 0.2, 0.3]).unwrap(), [0.1, 0.2, 0.3]);
    assert!(matches!(
        predict_pose(&m, &[1.0]),
        Err(Error::DimMismatch { expected: 2, got: 1 })
    ));
}

#[test]
fn v_to_p_fits_a_realizable_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = affine(3, 6, &rows(&mut rng, 1, 18)[0], &[0.3, -0.2, 5.0]);
    let vs = rows(&mut rng, 80, 6);
    let pairs: Vec<_> = vs.iter().map(|v| (dv(v), truth.apply(&dv(v).0.iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap())).collect();
    let (m, report) = fit_v_to_p(&pairs, &MapFitConfig::default()).unwrap();
    assert!(report.train_l1 < 1e-3, "{report:?}");
    assert!(report.warnings.is_empty());
    assert_eq!((m.pose_dim(), m.vec_dim()), (3, 6));
}

/// Best mean absolute error over lines through two sample points; an L1
/// line fit always has an optimum of this form.
fn lad_oracle(pts: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let (a, b) = (pts[i], pts[j]);
            let slope = (b.1 - a.1) / (b.0 - a.0);
            let icpt = a.1 - slope * a.0;
            let err = pts.iter().map(|p| (p.1 - slope * p.0 - icpt).abs()).sum::<f64>() / pts.len() as f64;
            best = best.min(err);
        }
    }
    best
}

#[test]
fn l1_line_is_near_the_lad_optimum() {
    let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 4.0)];
    let opt = lad_oracle(&pts);
    assert!((opt - 1.0 / 3.0).abs() < 1e-12);
    let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0]).collect();
    let ys: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.1]).collect();
    let (_, report) = fit_affine_l1(&xs, &ys, &MapFitConfig::default()).unwrap();
    assert!(report.train_l1 <= opt * 1.1, "{} vs {opt}", report.train_l1);

    // Outliers pull least squares away; the L1 refinement recovers most of it.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pts: Vec<(f64, f64)> = (0..30).map(|i| (i as f64 / 10.0, 1.5 * i as f64 / 10.0 - 0.5)).collect();
    for p in pts.iter_mut().step_by(7) {
        p.1 += rng.random_range(3.0..6.0);
    }
    let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0]).collect();
    let ys: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.1]).collect();
    let (_, report) = fit_affine_l1(&xs, &ys, &MapFitConfig::default()).unwrap();
    assert!(report.train_l1 <= lad_oracle(&pts) * 1.1, "{} vs {}", report.train_l1, lad_oracle(&pts));
}

#[test]
fn constant_targets_and_degenerate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vs = rows(&mut rng, 20, 4);
    let pairs: Vec<_> = vs.iter().map(|v| (dv(v), vec![1.5, -2.0, 0.25])).collect();
    let (m, report) = fit_v_to_p(&pairs, &MapFitConfig::default()).unwrap();
    assert!(report.train_l1 < 1e-9);
    assert!(m.affine.weight.iter().all(|w| w.abs() < 1e-9));
    assert!((m.affine.bias[0] - 1.5).abs() < 1e-9);

    let same: Vec<_> = (0..5).map(|i| (dv(&[0.5, 0.5]), vec![i as f64, 0.0, 0.0])).collect();
    let (_, report) = fit_v_to_p(&same, &MapFitConfig::default()).unwrap();
    assert!(!report.warnings.is_empty());
    assert!(matches!(fit_v_to_p(&same[..1], &MapFitConfig::default()), Err(Error::Empty(_))));
}

fn realizable_pv(seed: u64) -> (Vec<(PoseCode, DrivingVector)>, Affine) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = affine(8, 3, &rows(&mut rng, 1, 24)[0], &rows(&mut rng, 1, 8)[0]);
    let ps: Vec<Vec<f64>> = (0..60)
        .map(|_| vec![rng.random_range(-0.25..0.25), rng.random_range(-0.2..0.2), rng.random_range(-30.0..30.0)])
        .collect();
    let pairs = ps.iter().map(|p| (p.clone(), dv(&truth.apply(p).unwrap()))).collect();
    (pairs, truth)
}

#[test]
fn p_to_v_fits_and_is_affine_at_inference() {
    let (pairs, _) = realizable_pv(3);
    let (m, report) = fit_p_to_v(&pairs, &MapFitConfig::default()).unwrap();
    assert!(report.train_l1 < 1e-2, "{report:?}");
    let p = vec![0.1, -0.05, 12.0];
    assert_eq!(m.apply(&p).unwrap(), m.apply(&p).unwrap());

    let inf = m.inference_affine();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (p1, p2) = (rows(&mut rng, 1, 3).remove(0), rows(&mut rng, 1, 3).remove(0));
        let d: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
        let lhs: Vec<f64> = m.apply(&p1).unwrap().iter().zip(m.apply(&p2).unwrap()).map(|(a, b)| a - b).collect();
        let rhs = inf.linear(&d).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in m.apply(&p1).unwrap().iter().zip(inf.apply(&p1).unwrap()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn maps_preserve_affine_combinations(alpha in 0.0f64..1.0, seed in 0u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vp = VecToPoseMap { affine: affine(3, 5, &rows(&mut rng, 1, 15)[0], &[1.0, 2.0, 3.0]) };
        let (x, y) = (rows(&mut rng, 1, 5).remove(0), rows(&mut rng, 1, 5).remove(0));
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let (fx, fy, fm) = (predict_pose(&vp, &x).unwrap(), predict_pose(&vp, &y).unwrap(), predict_pose(&vp, &mix).unwrap());
        for i in 0..3 {
            prop_assert!((fm[i] - (alpha * fx[i] + (1.0 - alpha) * fy[i])).abs() < 1e-6);
        }
        let pv = PoseToVecMap {
            linear: affine(4, 3, &rows(&mut rng, 1, 12)[0], &rows(&mut rng, 1, 4)[0]),
            batchnorm: BatchNorm1d {
                gamma: vec![1.5, 0.5, 2.0, 1.0],
                beta: vec![0.1, 0.2, 0.3, 0.4],
                running_mean: vec![0.3, -0.1, 0.0, 0.2],
                running_var: vec![2.0, 0.5, 1.0, 0.1],
                eps: 1e-5,
            },
        };
        let (x, y) = (rows(&mut rng, 1, 3).remove(0), rows(&mut rng, 1, 3).remove(0));
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let (fx, fy, fm) = (pv.apply(&x).unwrap(), pv.apply(&y).unwrap(), pv.apply(&mix).unwrap());
        for i in 0..4 {
            prop_assert!((fm[i] - (alpha * fx[i] + (1.0 - alpha) * fy[i])).abs() < 1e-6);
        }
    }
}

#[test]
fn audio_ols_hand_case() {
    let xs = vec![vec![0.0], vec![2.0]];
    let ys = vec![vec![1.0], vec![5.0]];
    let (m, report) = fit_a_to_v_f64(&xs, &ys).unwrap();
    assert_eq!(m.standardization.mu, [1.0]);
    assert_eq!(m.standardization.sigma, [1.0]);
    assert!((m.affine.weight[0] - 2.0).abs() < 1e-12 && (m.affine.bias[0] - 3.0).abs() < 1e-12);
    assert!(report.train_l1 < 1e-12);
    assert!((apply_a_to_v(&m, &[0.0], true).unwrap()[0] - 1.0).abs() < 1e-12);
    assert!((apply_a_to_v(&m, &[0.0], false).unwrap()[0] - 3.0).abs() < 1e-12);
    assert_eq!(apply_a_to_v(&m, &[1.0], true).unwrap(), m.affine.bias);

    let (c, _) = fit_a_to_v_f64(&rows(&mut ChaCha8Rng::seed_from_u64(5), 6, 4), &vec![vec![7.0, -1.0]; 6]).unwrap();
    assert!(c.affine.weight.iter().all(|w| w.abs() < 1e-12));
    assert!((c.affine.bias[0] - 7.0).abs() < 1e-12 && (c.affine.bias[1] + 1.0).abs() < 1e-12);
}

/// Standardized design with an intercept column, built independently of the
/// fitting code.
fn design(xs: &[Vec<f64>], m: &AudioToVecMap) -> DMatrix<f64> {
    let k = xs[0].len();
    DMatrix::from_fn(xs.len(), k + 1, |i, j| {
        if j == k {
            1.0
        } else {
            (xs[i][j] - m.standardization.mu[j]) / m.standardization.sigma[j]
        }
    })
}

fn coefficients(m: &AudioToVecMap, out: usize) -> DVector<f64> {
    let k = m.audio_dim();
    DVector::from_fn(k + 1, |i, _| if i < k { m.affine.weight[out * k + i] } else { m.affine.bias[out] })
}

#[test]
fn ols_matches_the_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64).collect()).collect();
    let ys = rows(&mut rng, 40, 3);
    let (m, report) = fit_a_to_v_f64(&xs, &ys).unwrap();
    assert_eq!(report.rank, 6);
    let x = design(&xs, &m);
    let xtx = x.transpose() * &x;
    for out in 0..3 {
        let y = DVector::from_fn(40, |i, _| ys[i][out]);
        let w = coefficients(&m, out);
        // Normal equations hold, and agree with the explicit solution.
        let resid = x.transpose() * (&x * &w - &y);
        assert!(resid.amax() < 1e-6, "{}", resid.amax());
        let direct = xtx.clone().try_inverse().unwrap() * x.transpose() * &y;
        assert!((direct - &w).amax() < 1e-8);
    }
}

#[test]
fn underdetermined_ols_is_minimum_norm() {
    let xs = vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]];
    let ys = vec![vec![3.0], vec![-1.0]];
    let (m, report) = fit_a_to_v_f64(&xs, &ys).unwrap();
    assert!(report.train_l1 < 1e-12);
    let x = design(&xs, &m);
    let y = DVector::from_vec(vec![3.0, -1.0]);
    // x^T (x x^T)^+ y; x x^T is rank one here because standardization
    // centres both rows, so use its own pseudo-inverse.
    let gram = &x * x.transpose();
    let oracle = x.transpose() * gram.pseudo_inverse(1e-12).unwrap() * &y;
    let w = coefficients(&m, 0);
    assert!((&oracle - &w).amax() < 1e-10, "{oracle} vs {w}");
    assert!((&x * &w - y).amax() < 1e-10);
}

#[test]
fn constant_audio_features_are_dropped() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut xs = rows(&mut rng, 10, 3);
    xs.iter_mut().for_each(|r| r[1] = 4.0);
    let ys = rows(&mut rng, 10, 2);
    let (m, report) = fit_a_to_v_f64(&xs, &ys).unwrap();
    assert_eq!(m.standardization.dropped, [1]);
    assert_eq!(report.warnings.len(), 1);
    assert!(m.affine.weight[1] == 0.0 && m.affine.weight[4] == 0.0);
    assert!(apply_a_to_v(&m, &[0.0, 100.0, 0.0], true).unwrap().iter().all(|v| v.is_finite()));
    assert!(matches!(apply_a_to_v(&m, &[0.0], true), Err(Error::DimMismatch { .. })));
}

#[test]
fn pose_equation_hand_cases() {
    let vp = VecToPoseMap {
        affine: affine(1, 1, &[2.0], &[0.0]),
    };
    let pv = PoseToVecMap::from_affine(affine(1, 1, &[0.1], &[0.0]));
    let v = pose_drive_vector(&[0.5], &vp, &pv, &[3.0]).unwrap();
    assert!((v[0] - 0.7).abs() < 1e-12);
    // The constant term of f_{p->v} is applied as-is.
    let shifted = PoseToVecMap::from_affine(affine(1, 1, &[0.1], &[0.05]));
    let v = pose_drive_vector(&[0.5], &vp, &shifted, &[1.0]).unwrap();
    assert!((v[0] - 0.55).abs() < 1e-12);
}

#[test]
fn audio_equation_hand_case() {
    let av = AudioToVecMap::from_affine(affine(1, 1, &[2.0], &[0.0]));
    let vp = VecToPoseMap {
        affine: affine(1, 1, &[1.0], &[0.0]),
    };
    let pv = PoseToVecMap::from_affine(affine(1, 1, &[0.5], &[0.0]));
    let v = audio_drive_vector(&[1.0], (&av, &vp, &pv), &[1.0], &[0.5]).unwrap();
    assert!((v[0] - 2.5).abs() < 1e-9);
    // Equal audio and a pose map that sends f_{a->v}(a) back to p_source.
    let v = audio_drive_vector(&[2.0], (&av, &vp, &pv), &[1.0], &[1.0]).unwrap();
    assert!((v[0] - 2.0).abs() < 1e-12);
}

#[test]
fn pose_differences_are_exactly_linear() {
    let (pairs, _) = realizable_pv(9);
    let (pv, _) = fit_p_to_v(&pairs, &MapFitConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let vp = VecToPoseMap {
        affine: affine(3, 8, &rows(&mut rng, 1, 24)[0], &[0.1, 0.2, 0.3]),
    };
    let m = pv.inference_affine();
    let v_source = rows(&mut rng, 1, 8).remove(0);
    let (p1, p2) = (vec![0.1, 0.0, 10.0], vec![-0.2, 0.1, -15.0]);
    let v1 = pose_drive_vector(&v_source, &vp, &pv, &p1).unwrap();
    let v2 = pose_drive_vector(&v_source, &vp, &pv, &p2).unwrap();
    let expected = m.linear(&[0.3, -0.1, 25.0]).unwrap();
    for ((a, b), e) in v1.iter().zip(&v2).zip(&expected) {
        assert!((a - b - e).abs() < 1e-5 * (1.0 + e.abs()));
    }
}

#[test]
fn map_files_round_trip_and_unfitted_maps_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, _) = realizable_pv(11);
    let (pv, _) = fit_p_to_v(&pairs, &MapFitConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (av, _) = fit_a_to_v_f64(&rows(&mut rng, 12, 4), &rows(&mut rng, 12, 8)).unwrap();
    let maps = ControlMaps {
        v_to_p: Some(VecToPoseMap {
            affine: affine(3, 8, &rows(&mut rng, 1, 24)[0], &[1.0, 2.0, 3.0]),
        }),
        p_to_v: Some(pv),
        a_to_v: Some(av),
    };
    maps.save_dir(dir.path()).unwrap();
    let back = ControlMaps::load_dir(dir.path()).unwrap();
    assert_eq!(back.v_to_p, maps.v_to_p);
    assert_eq!(back.p_to_v, maps.p_to_v);
    assert_eq!(back.a_to_v, maps.a_to_v);
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(P_TO_V_FILE)).unwrap()).unwrap();
    assert_eq!(raw["kind"], "p_to_v");
    assert!(raw["batchnorm"]["running_var"].is_array());

    let empty = ControlMaps::default();
    assert!(matches!(empty.pose_maps(), Err(Error::Unfitted(_))));
    let partial = ControlMaps {
        a_to_v: None,
        ..back
    };
    assert!(matches!(partial.audio_maps(), Err(Error::Unfitted(m)) if m == "a_to_v"));
}

#[test]
fn matching_pose_reproduces_self_driving() {
    let cfg = NetConfig {
        resolution: 16,
        base_channels: 4,
        max_channels: 16,
        driving_vector_dim: 6,
    };
    let emb = EmbeddingNetwork::new(cfg, 1).unwrap();
    let drv = DrivingNetwork::new(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = FaceFrame::new(Tensor::from_fn([1, 3, 16, 16], |_| rng.random_range(0.0..1.0))).unwrap();
    let vp = VecToPoseMap {
        affine: affine(3, 6, &rows(&mut rng, 1, 18)[0], &[0.2, 0.0, -1.0]),
    };
    let pv = PoseToVecMap::from_affine(affine(6, 3, &rows(&mut rng, 1, 18)[0], &[0.0; 6]));
    let v_src = drive_encode(&drv, &src).unwrap();
    let p_src = predict_pose(&vp, &to_f64(&v_src)).unwrap();
    let maps = ControlMaps {
        v_to_p: Some(vp),
        p_to_v: Some(pv),
        a_to_v: None,
    };
    let out = drive_with_pose(&emb, &drv, &maps, std::slice::from_ref(&src), &[p_src]).unwrap();
    let embedded = embed_multi(&emb, std::slice::from_ref(&src)).unwrap();
    let (_, direct) = drive_decode(&drv, &v_src, &embedded).unwrap();
    assert_eq!(out[0].tensor(), direct.tensor());
    assert_eq!(out[0].tensor().shape(), [1, 3, 16, 16]);
    assert!(matches!(
        drive_with_pose(&emb, &drv, &ControlMaps::default(), &[src.clone()], &[vec![0.0; 3]]),
        Err(Error::Unfitted(_))
    ));
    assert!(matches!(drive_with_pose(&emb, &drv, &maps, &[], &[vec![0.0; 3]]), Err(Error::Empty(_))));
}
