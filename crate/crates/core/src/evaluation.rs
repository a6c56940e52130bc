//! Reconstruction ablation over training stage and source count, and the
//! linear pose probe.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{predict_pose, PoseCode, VecToPoseMap};
use crate::dataset::synth::{ROT_RANGE, TX_RANGE, TY_RANGE};
use crate::dataset::{DatasetIndex, FrameCache, FrameRef, Split};
use crate::error::{Error, Result};
use crate::losses::photometric_l1;
use crate::networks::{drive_encode, x2face_forward, DrivingNetwork, EmbeddingNetwork, FaceFrame};

/// Full-scale reference L1 errors: (stage, sources, L1, improvement %).
pub const FULL_SCALE_RECONSTRUCTION: [(u8, usize, f64, f64); 4] = [
    (1, 1, 0.0632, 0.0),
    (2, 1, 0.0630, 0.32),
    (1, 3, 0.0524, 17.14),
    (2, 3, 0.0521, 17.62),
];

/// Full-scale reference pose-probe errors in degrees: (method, roll, pitch,
/// yaw, mean).
pub const FULL_SCALE_POSE_PROBE: [(&str, f64, f64, f64, f64); 2] = [
    ("X2Face", 5.85, 7.59, 14.62, 9.36),
    ("supervised", 8.75, 5.85, 6.45, 7.02),
];

/// Anything that generates a frame from sources and a driving frame.
pub trait Reconstructor {
    fn reconstruct(&self, sources: &[FaceFrame], driving: &FaceFrame) -> Result<FaceFrame>;
}

/// A trained network pair.
pub struct ModelPair<'a> {
    pub embedding: &'a EmbeddingNetwork,
    pub driving: &'a DrivingNetwork,
}

impl Reconstructor for ModelPair<'_> {
    fn reconstruct(&self, sources: &[FaceFrame], driving: &FaceFrame) -> Result<FaceFrame> {
        x2face_forward(self.embedding, self.driving, sources, driving)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconEvalConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub n_sources: Vec<usize>,
    pub split: Split,
}

impl Default for ReconEvalConfig {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            seed: 0,
            n_sources: vec![1, 3],
            split: Split::Test,
        }
    }
}

/// One evaluation tuple: a driving frame and disjoint source frames, all
/// from one video. Settings with fewer sources use a prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTuple {
    pub driving: FrameRef,
    pub sources: Vec<FrameRef>,
}

/// Draws `n` tuples uniformly over identities, then videos, then frames.
pub fn sample_eval_tuples(index: &DatasetIndex, split: Split, n: usize, max_sources: usize, seed: u64) -> Result<Vec<EvalTuple>> {
    let ids = index.identities_in(split);
    if ids.is_empty() {
        return Err(Error::Dataset(format!("{} split is empty", split.as_str())));
    }
    let need = max_sources + 1;
    for &i in &ids {
        let ident = &index.identities[i];
        for v in &ident.videos {
            if v.frames.len() < need {
                return Err(Error::Dataset(format!(
                    "{}/{} has {} frames; {max_sources} sources need {need}",
                    ident.id,
                    v.id,
                    v.frames.len()
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let identity = ids[rng.random_range(0..ids.len())];
        let video = rng.random_range(0..index.identities[identity].videos.len());
        let n_frames = index.identities[identity].videos[video].frames.len();
        let picks = rand::seq::index::sample(&mut rng, n_frames, need).into_vec();
        let r = |frame| FrameRef { identity, video, frame };
        out.push(EvalTuple {
            driving: r(picks[0]),
            sources: picks[1..].iter().map(|&f| r(f)).collect(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSetting {
    pub stage: u8,
    pub n_source: usize,
    pub l1: f64,
    /// Relative to (stage 1, fewest sources); 0 when that baseline is 0.
    pub improvement_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub n_pairs: usize,
    pub seed: u64,
    pub split: Split,
    pub settings: Vec<ReconSetting>,
    /// Full-scale reference values, for orientation only.
    pub full_scale_reference: Vec<ReconSetting>,
}

impl ReconReport {
    pub fn l1(&self, stage: u8, n_source: usize) -> Option<f64> {
        self.settings
            .iter()
            .find(|s| s.stage == stage && s.n_source == n_source)
            .map(|s| s.l1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<8} {:>10} {:>13}", "stage", "sources", "L1", "improvement");
        for r in &self.settings {
            let stage = if r.stage == 1 { "I" } else { "II" };
            let src = if r.n_source == 1 { "S".to_string() } else { format!("M({})", r.n_source) };
            let _ = writeln!(s, "{:<10} {:<8} {:>10.4} {:>12.2}%", stage, src, r.l1, r.improvement_pct);
        }
        s
    }
}

/// Mean reconstruction L1 of each (stage, source count) setting over one
/// shared set of tuples.
pub fn eval_reconstruction(
    stage1: &dyn Reconstructor,
    stage2: &dyn Reconstructor,
    index: &DatasetIndex,
    cfg: &ReconEvalConfig,
) -> Result<ReconReport> {
    let mut counts = cfg.n_sources.clone();
    counts.sort_unstable();
    counts.dedup();
    let max_sources = *counts.last().ok_or_else(|| Error::Config("no source counts requested".into()))?;
    if counts[0] == 0 || cfg.n_pairs == 0 {
        return Err(Error::Config("source counts and n_pairs must be positive".into()));
    }
    let tuples = sample_eval_tuples(index, cfg.split, cfg.n_pairs, max_sources, cfg.seed)?;
    let cache = FrameCache::load(index, &[cfg.split])?;
    let frame = |r: &FrameRef| -> Result<FaceFrame> { FaceFrame::new(cache.get(r)?.clone()) };

    let mut settings = Vec::new();
    for &n in &counts {
        for (stage, model) in [(1u8, stage1), (2u8, stage2)] {
            let mut sum = 0.0;
            for t in &tuples {
                let sources = t.sources[..n].iter().map(frame).collect::<Result<Vec<_>>>()?;
                let driving = frame(&t.driving)?;
                let gen = model.reconstruct(&sources, &driving)?;
                sum += photometric_l1(gen.tensor(), driving.tensor())?;
            }
            settings.push(ReconSetting {
                stage,
                n_source: n,
                l1: sum / tuples.len() as f64,
                improvement_pct: 0.0,
            });
        }
    }
    let base = settings[0].l1;
    for s in &mut settings {
        s.improvement_pct = if base > 0.0 { 100.0 * (base - s.l1) / base } else { 0.0 };
    }
    let full_scale_reference = FULL_SCALE_RECONSTRUCTION
        .iter()
        .map(|&(stage, n_source, l1, improvement_pct)| ReconSetting {
            stage,
            n_source,
            l1,
            improvement_pct,
        })
        .collect();
    Ok(ReconReport {
        n_pairs: tuples.len(),
        seed: cfg.seed,
        split: cfg.split,
        settings,
        full_scale_reference,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseProbeReport {
    pub n: usize,
    pub axes: Vec<String>,
    pub per_axis_mae: Vec<f64>,
    pub mae: f64,
    /// Per-axis MAE divided by the axis half-range, when ranges are known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_to_half_range: Option<Vec<f64>>,
}

impl PoseProbeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for a in &self.axes {
            let _ = write!(s, "{a:>10} ");
        }
        let _ = writeln!(s, "{:>10}", "MAE");
        for v in &self.per_axis_mae {
            let _ = write!(s, "{v:>10.4} ");
        }
        let _ = writeln!(s, "{:>10.4}", self.mae);
        s
    }
}

/// Per-axis mean absolute error between predicted and true poses.
pub fn pose_errors(pred: &[PoseCode], truth: &[PoseCode]) -> Result<(Vec<f64>, f64)> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Empty(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let d = truth[0].len();
    let mut sums = vec![0.0; d];
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != d || t.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: p.len().min(t.len()),
            });
        }
        for (s, (a, b)) in sums.iter_mut().zip(p.iter().zip(t)) {
            *s += (a - b).abs();
        }
    }
    let per: Vec<f64> = sums.iter().map(|s| s / pred.len() as f64).collect();
    let mean = per.iter().sum::<f64>() / d as f64;
    Ok((per, mean))
}

/// Synthetic pose axes and their half-ranges.
pub fn synthetic_axes() -> (Vec<String>, Vec<f64>) {
    let half = |r: (f32, f32)| f64::from(r.1 - r.0) / 2.0;
    (
        vec!["tx".into(), "ty".into(), "rot".into()],
        vec![half(TX_RANGE), half(TY_RANGE), half(ROT_RANGE)],
    )
}

pub fn eval_pose_probe(f_vp: &VecToPoseMap, labeled: &[(FaceFrame, PoseCode)], drv: &DrivingNetwork) -> Result<PoseProbeReport> {
    let mut pred = Vec::with_capacity(labeled.len());
    let mut truth = Vec::with_capacity(labeled.len());
    for (f, p) in labeled {
        let v: Vec<f64> = drive_encode(drv, f)?.0.iter().map(|&x| x as f64).collect();
        pred.push(predict_pose(f_vp, &v)?);
        truth.push(p.clone());
    }
    let (per_axis_mae, mae) = pose_errors(&pred, &truth)?;
    let (names, half) = synthetic_axes();
    let known = per_axis_mae.len() == names.len();
    Ok(PoseProbeReport {
        n: labeled.len(),
        axes: if known {
            names
        } else {
            (0..per_axis_mae.len()).map(|i| format!("axis{i}")).collect()
        },
        relative_to_half_range: known.then(|| per_axis_mae.iter().zip(&half).map(|(m, h)| m / h).collect()),
        per_axis_mae,
        mae,
    })
}

/// Every labelled frame of `split` with its ground-truth pose.
pub fn labeled_frames(index: &DatasetIndex, split: Split) -> Result<Vec<(FaceFrame, PoseCode)>> {
    let cache = FrameCache::load(index, &[split])?;
    index
        .frames_in(split)
        .iter()
        .filter(|r| index.labels(r).is_some())
        .map(|r| Ok((FaceFrame::new(cache.get(r)?.clone())?, crate::control::frame_pose(index, r)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::Affine;
    use crate::dataset::synth::{generate_synthetic_dataset, SynthConfig};
    use crate::networks::NetConfig;

    struct Oracle;

    impl Reconstructor for Oracle {
        fn reconstruct(&self, _: &[FaceFrame], driving: &FaceFrame) -> Result<FaceFrame> {
            Ok(driving.clone())
        }
    }

    /// Averages the sources, ignoring the driving frame.
    struct MeanOfSources;

    impl Reconstructor for MeanOfSources {
        fn reconstruct(&self, sources: &[FaceFrame], _: &FaceFrame) -> Result<FaceFrame> {
            let ts: Vec<_> = sources.iter().map(|s| s.tensor().clone()).collect();
            FaceFrame::new(crate::networks::exact_mean(&ts))
        }
    }

    fn data(dir: &std::path::Path) -> DatasetIndex {
        generate_synthetic_dataset(&SynthConfig::new(6, 2, 6, 16, 3), dir, false).unwrap()
    }

    #[test]
    fn oracle_model_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let index = data(dir.path());
        let cfg = ReconEvalConfig {
            n_pairs: 10,
            ..Default::default()
        };
        let r = eval_reconstruction(&Oracle, &Oracle, &index, &cfg).unwrap();
        assert_eq!(r.settings.len(), 4);
        assert!(r.settings.iter().all(|s| s.l1 == 0.0 && s.improvement_pct == 0.0));
        assert_eq!(r.full_scale_reference[2].improvement_pct, 17.14);
    }

    #[test]
    fn settings_share_tuples_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let index = data(dir.path());
        let cfg = ReconEvalConfig {
            n_pairs: 12,
            seed: 4,
            ..Default::default()
        };
        let a = eval_reconstruction(&MeanOfSources, &MeanOfSources, &index, &cfg).unwrap();
        let b = eval_reconstruction(&MeanOfSources, &MeanOfSources, &index, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.l1(1, 1), a.l1(2, 1));
        assert_eq!(a.l1(1, 3), a.l1(2, 3));
        assert!(a.to_table().contains("M(3)"));

        let t = sample_eval_tuples(&index, Split::Test, 50, 3, 9).unwrap();
        for x in &t {
            let mut all: Vec<usize> = x.sources.iter().map(|s| s.frame).collect();
            all.push(x.driving.frame);
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 4);
            assert!(x.sources.iter().all(|s| (s.identity, s.video) == (x.driving.identity, x.driving.video)));
        }
        assert_eq!(t, sample_eval_tuples(&index, Split::Test, 50, 3, 9).unwrap());
    }

    #[test]
    fn short_videos_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_synthetic_dataset(&SynthConfig::new(4, 1, 3, 8, 0), dir.path(), false).unwrap();
        match sample_eval_tuples(&index, Split::Test, 5, 3, 0) {
            Err(Error::Dataset(m)) => assert!(m.contains("/vid00"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(sample_eval_tuples(&index, Split::Test, 5, 2, 0).is_ok());
    }

    #[test]
    fn pose_error_examples() {
        let truth = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 10.0]];
        assert_eq!(pose_errors(&truth, &truth).unwrap(), (vec![0.0; 3], 0.0));
        let off: Vec<Vec<f64>> = truth.iter().map(|p| p.iter().map(|x| x + 5.0).collect()).collect();
        assert_eq!(pose_errors(&off, &truth).unwrap(), (vec![5.0; 3], 5.0));
        // Permutation invariance and degree-1 homogeneity.
        let rev: Vec<_> = off.iter().rev().cloned().collect();
        let truth_rev: Vec<_> = truth.iter().rev().cloned().collect();
        assert_eq!(pose_errors(&rev, &truth_rev).unwrap(), (vec![5.0; 3], 5.0));
        let scaled: Vec<Vec<f64>> = truth.iter().map(|p| p.iter().map(|x| x + 15.0).collect()).collect();
        assert_eq!(pose_errors(&scaled, &truth).unwrap().1, 15.0);
        assert!(pose_errors(&[], &[]).is_err());
    }

    #[test]
    fn probe_report_on_a_network() {
        let dir = tempfile::tempdir().unwrap();
        let index = data(dir.path());
        let cfg = NetConfig {
            resolution: 16,
            base_channels: 4,
            max_channels: 16,
            driving_vector_dim: 8,
        };
        let drv = DrivingNetwork::new(cfg, 0).unwrap();
        let f_vp = VecToPoseMap {
            affine: Affine::zeros(3, 8),
        };
        let labeled = labeled_frames(&index, Split::Test).unwrap();
        let r = eval_pose_probe(&f_vp, &labeled, &drv).unwrap();
        assert_eq!(r.n, labeled.len());
        let expected: Vec<f64> = (0..3)
            .map(|k| labeled.iter().map(|(_, p)| p[k].abs()).sum::<f64>() / labeled.len() as f64)
            .collect();
        for (a, b) in r.per_axis_mae.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.axes, ["tx", "ty", "rot"]);
        assert!(r.to_table().contains("MAE"));
    }
}
