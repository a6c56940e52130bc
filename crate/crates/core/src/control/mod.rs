//! Linear maps between driving vectors, pose codes and audio features, and
//! the drive equations built from them.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, FrameCache, FrameRef, Split, AUDIO_DIM, POSE_DIM};
use crate::diffops::Graph;
use crate::error::{Error, Result};
use crate::networks::{
    drive_decode_batch, drive_encode, drive_encode_batch, embed_multi, DrivingNetwork, DrivingVector, EmbeddingNetwork,
    FaceFrame,
};
use crate::tensor::Tensor;

pub const V_TO_P_FILE: &str = "v_to_p.json";
pub const P_TO_V_FILE: &str = "p_to_v.json";
pub const A_TO_V_FILE: &str = "a_to_v.json";
pub const PINV_RTOL: f64 = 1e-10;
const BN_EPS: f64 = 1e-5;

/// A (yaw, pitch, roll) control; the synthetic analogue is (tx, ty, rot).
pub type PoseCode = Vec<f64>;

/// `y = W x + b` with `W` row-major, `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != out_dim * in_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "affine {out_dim}x{in_dim} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::DimMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        Ok(self.apply_unchecked(x))
    }

    fn apply_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.in_dim.max(1))
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// The linear part applied to `x`, without the bias.
    pub fn linear(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.apply(x)?;
        Ok(y.iter().zip(&self.bias).map(|(y, b)| y - b).collect())
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self.weight.iter().chain(&self.bias).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Diagnostics of a fit.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub n_samples: usize,
    /// Mean absolute training error of the returned map.
    pub train_l1: f64,
    /// Numerical rank of the design (intercept column included).
    pub rank: usize,
    pub warnings: Vec<String>,
}

impl FitReport {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Settings of the SGD fits (L1 loss, full batch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapFitConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for MapFitConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

/// Per-column population mean and standard deviation.
fn column_stats(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mu = vec![0.0; dim];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    (mu, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Variance below this (relative to the feature scale) counts as constant.
fn is_constant(sigma: f64, mu: f64) -> bool {
    sigma <= 1e-12 * mu.abs().max(1.0)
}

fn standardize(rows: &[Vec<f64>], mu: &[f64], sigma: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            r.iter()
                .zip(mu)
                .zip(sigma)
                .map(|((v, m), s)| if is_constant(*s, *m) { 0.0 } else { (v - m) / s })
                .collect()
        })
        .collect()
}

/// Minimum-norm least squares of `targets` on `[x, 1]`, via the SVD
/// pseudo-inverse. Returns (affine map, rank).
pub fn least_squares(x: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(Affine, usize)> {
    let n = x.len();
    if n == 0 || targets.len() != n {
        return Err(Error::Empty(format!("least squares on {n} inputs, {} targets", targets.len())));
    }
    let (k, m) = (x[0].len(), targets[0].len());
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j < k { x[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, m, |i, j| targets[i][j]);
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = PINV_RTOL * smax.max(f64::MIN_POSITIVE) * (n.max(k + 1) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let sol = svd
        .solve(&y, tol)
        .map_err(|e| Error::Precondition(format!("least squares: {e}")))?;
    let mut weight = Vec::with_capacity(m * k);
    for j in 0..m {
        weight.extend((0..k).map(|i| sol[(i, j)]));
    }
    let bias = (0..m).map(|j| sol[(k, j)]).collect();
    Ok((Affine::new(m, k, weight, bias)?, rank))
}

fn mean_l1(pred: impl Iterator<Item = Vec<f64>>, targets: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.zip(targets) {
        s += p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += t.len();
    }
    s / count.max(1) as f64
}

fn check_pairs(xs: &[Vec<f64>], ys: &[Vec<f64>], min: usize, what: &str) -> Result<(usize, usize)> {
    if xs.len() < min {
        return Err(Error::Empty(format!("{what} needs at least {min} pairs, got {}", xs.len())));
    }
    let (k, m) = (xs[0].len(), ys[0].len());
    if xs.iter().any(|x| x.len() != k) || ys.iter().any(|y| y.len() != m) {
        return Err(Error::Shape(format!("{what}: inconsistent pair dimensions")));
    }
    if xs.iter().chain(ys).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} training pair")));
    }
    Ok((k, m))
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let k = rows[0].len();
    Tensor::from_vec([rows.len(), k, 1, 1], rows.concat()).expect("rows share a width")
}

/// Full-batch momentum SGD on the mean absolute error, keeping the best
/// parameters seen. `build` maps (graph, parameter vars) to predictions.
fn l1_refine<F>(params: &mut [Tensor<f64>], targets: &[Vec<f64>], cfg: &MapFitConfig, mut build: F) -> f64
where
    F: FnMut(&mut Graph<f64>, &[crate::diffops::Var]) -> crate::diffops::Var,
{
    let target = to_tensor(targets);
    let mut velocity: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut best = (f64::INFINITY, params.to_vec());
    for step in 0..=cfg.steps {
        let mut g = Graph::new(true);
        let vars: Vec<_> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let pred = build(&mut g, &vars);
        let t = g.input(target.clone());
        let loss = g.mean_abs_diff(pred, t);
        let value = g.scalar(loss);
        if value < best.0 {
            best = (value, params.to_vec());
        }
        if step == cfg.steps || !value.is_finite() {
            break;
        }
        // Linear decay keeps the subgradient iterates from oscillating.
        let lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64);
        let mut grads = g.backward(loss);
        for ((p, v), var) in params.iter_mut().zip(&mut velocity).zip(&vars) {
            let Some(gr) = grads.take(*var) else { continue };
            for ((w, v), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                *v = cfg.momentum * *v + gv;
                *w -= lr * *v;
            }
        }
    }
    params.clone_from_slice(&best.1);
    best.0
}

/// `f_{v->p}`: affine probe from driving vectors to pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecToPoseMap {
    pub affine: Affine,
}

impl VecToPoseMap {
    pub fn pose_dim(&self) -> usize {
        self.affine.out_dim
    }

    pub fn vec_dim(&self) -> usize {
        self.affine.in_dim
    }
}

/// Fits an affine map minimizing mean absolute error. Starts from the least
/// squares solution, then refines by SGD on the L1 loss. Inputs are
/// standardized internally; the returned map acts on raw inputs.
pub fn fit_affine_l1(xs: &[Vec<f64>], ys: &[Vec<f64>], cfg: &MapFitConfig) -> Result<(Affine, FitReport)> {
    let (k, m) = check_pairs(xs, ys, 2, "affine fit")?;
    let (mu, sigma) = column_stats(xs, k);
    let z = standardize(xs, &mu, &sigma);
    let (init, rank) = least_squares(&z, ys)?;
    let mut report = FitReport {
        n_samples: xs.len(),
        rank,
        ..Default::default()
    };
    if rank < k + 1 {
        report.warn(format!("design is rank deficient: rank {rank} of {}", k + 1));
    }
    let mut params = vec![
        Tensor::from_vec([m, k, 1, 1], init.weight.clone())?,
        Tensor::from_vec([m, 1, 1, 1], init.bias.clone())?,
    ];
    let zt = to_tensor(&z);
    l1_refine(&mut params, ys, cfg, |g, p| {
        let x = g.input(zt.clone());
        g.linear(x, p[0], Some(p[1]))
    });

    // Fold the standardization into the weights.
    let (w, b) = (params[0].data(), params[1].data());
    let mut weight = vec![0.0; m * k];
    let mut bias = b.to_vec();
    for o in 0..m {
        for i in 0..k {
            if is_constant(sigma[i], mu[i]) {
                continue;
            }
            let wi = w[o * k + i] / sigma[i];
            weight[o * k + i] = wi;
            bias[o] -= wi * mu[i];
        }
    }
    let affine = Affine::new(m, k, weight, bias)?;
    affine.check_finite("fitted affine map")?;
    report.train_l1 = mean_l1(xs.iter().map(|x| affine.apply_unchecked(x)), ys);
    Ok((affine, report))
}

pub fn fit_v_to_p(pairs: &[(DrivingVector, PoseCode)], cfg: &MapFitConfig) -> Result<(VecToPoseMap, FitReport)> {
    let xs: Vec<Vec<f64>> = pairs.iter().map(|(v, _)| v.0.iter().map(|&x| x as f64).collect()).collect();
    let ys: Vec<Vec<f64>> = pairs.iter().map(|(_, p)| p.clone()).collect();
    let (affine, report) = fit_affine_l1(&xs, &ys, cfg)?;
    Ok((VecToPoseMap { affine }, report))
}

pub fn predict_pose(map: &VecToPoseMap, v: &[f64]) -> Result<PoseCode> {
    map.affine.apply(v)
}

/// Batch-norm parameters over the outputs of [`PoseToVecMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm1d {
    /// The identity transform (`eps = 0`).
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: 0.0,
        }
    }

    fn scale(&self, j: usize) -> f64 {
        self.gamma[j] / (self.running_var[j] + self.eps).sqrt()
    }
}

/// `f_{p->v}`: linear layer then batch norm; affine at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseToVecMap {
    pub linear: Affine,
    pub batchnorm: BatchNorm1d,
}

impl PoseToVecMap {
    /// A map with identity batch norm, so it equals `linear` exactly.
    pub fn from_affine(linear: Affine) -> Self {
        let d = linear.out_dim;
        Self {
            linear,
            batchnorm: BatchNorm1d::identity(d),
        }
    }

    pub fn pose_dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn vec_dim(&self) -> usize {
        self.linear.out_dim
    }

    /// The inference-mode map as one affine `v = M p + c`.
    pub fn inference_affine(&self) -> Affine {
        let (m, k) = (self.linear.out_dim, self.linear.in_dim);
        let bn = &self.batchnorm;
        let mut weight = self.linear.weight.clone();
        let mut bias = Vec::with_capacity(m);
        for j in 0..m {
            let s = bn.scale(j);
            weight[j * k..(j + 1) * k].iter_mut().for_each(|w| *w *= s);
            bias.push(s * (self.linear.bias[j] - bn.running_mean[j]) + bn.beta[j]);
        }
        Affine {
            out_dim: m,
            in_dim: k,
            weight,
            bias,
        }
    }

    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        let z = self.linear.apply(p)?;
        let bn = &self.batchnorm;
        Ok(z.iter()
            .enumerate()
            .map(|(j, z)| bn.scale(j) * (z - bn.running_mean[j]) + bn.beta[j])
            .collect())
    }
}

/// Fits `f_{p->v}` by full-batch SGD on the L1 loss with batch statistics;
/// the running statistics are then set to the statistics of the whole
/// training set and frozen.
pub fn fit_p_to_v(pairs: &[(PoseCode, DrivingVector)], cfg: &MapFitConfig) -> Result<(PoseToVecMap, FitReport)> {
    let xs: Vec<Vec<f64>> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let ys: Vec<Vec<f64>> = pairs.iter().map(|(_, v)| v.0.iter().map(|&x| x as f64).collect()).collect();
    let (k, m) = check_pairs(&xs, &ys, 2, "p->v fit")?;
    let (mu, sigma) = column_stats(&xs, k);
    let z = standardize(&xs, &mu, &sigma);

    // Warm start reproducing the least-squares prediction: the linear layer
    // carries the slopes, batch norm restores their spread and the intercept.
    let (ls, rank) = least_squares(&z, &ys)?;
    let mut report = FitReport {
        n_samples: xs.len(),
        rank,
        ..Default::default()
    };
    if rank < k + 1 {
        report.warn(format!("pose design is rank deficient: rank {rank} of {}", k + 1));
    }
    let zt = to_tensor(&z);
    let slopes = Tensor::from_vec([m, k, 1, 1], ls.weight.clone())?;
    let spread = {
        let proj = Affine::new(m, k, ls.weight.clone(), vec![0.0; m])?;
        let acts: Vec<Vec<f64>> = z.iter().map(|r| proj.apply_unchecked(r)).collect();
        column_stats(&acts, m).1
    };
    let gamma: Vec<f64> = spread.iter().map(|s| (s * s + BN_EPS).sqrt()).collect();
    let mut params = vec![
        slopes,
        Tensor::zeros([m, 1, 1, 1]),
        Tensor::from_vec([m, 1, 1, 1], gamma)?,
        Tensor::from_vec([m, 1, 1, 1], ls.bias.clone())?,
    ];
    let unused = vec![0.0; m];
    l1_refine(&mut params, &ys, cfg, |g, p| {
        let x = g.input(zt.clone());
        let h = g.linear(x, p[0], Some(p[1]));
        g.batch_norm(h, p[2], p[3], (&unused, &unused), "p_to_v.bn")
    });

    // Population statistics of the pre-norm activations, in standardized
    // pose space.
    let (w, b) = (params[0].data(), params[1].data());
    let lin = Affine::new(m, k, w.to_vec(), b.to_vec())?;
    let acts: Vec<Vec<f64>> = z.iter().map(|r| lin.apply_unchecked(r)).collect();
    let (rm, rs) = column_stats(&acts, m);

    // Fold the pose standardization into the linear layer.
    let mut weight = vec![0.0; m * k];
    let mut bias = b.to_vec();
    for o in 0..m {
        for i in 0..k {
            if is_constant(sigma[i], mu[i]) {
                continue;
            }
            let wi = w[o * k + i] / sigma[i];
            weight[o * k + i] = wi;
            bias[o] -= wi * mu[i];
        }
    }
    let map = PoseToVecMap {
        linear: Affine::new(m, k, weight, bias)?,
        batchnorm: BatchNorm1d {
            gamma: params[2].data().to_vec(),
            beta: params[3].data().to_vec(),
            running_mean: rm,
            running_var: rs.iter().map(|s| s * s).collect(),
            eps: BN_EPS,
        },
    };
    let inf = map.inference_affine();
    inf.check_finite("fitted p->v map")?;
    report.train_l1 = mean_l1(xs.iter().map(|x| inf.apply_unchecked(x)), &ys);
    Ok((map, report))
}

/// Per-feature standardization statistics; features with zero spread are
/// dropped (their weights are zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub dropped: Vec<usize>,
}

/// `f_{a->v}`: least squares on standardized audio features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioToVecMap {
    /// Weights act on standardized features.
    pub affine: Affine,
    pub standardization: Standardization,
}

impl AudioToVecMap {
    pub fn audio_dim(&self) -> usize {
        self.affine.in_dim
    }

    pub fn vec_dim(&self) -> usize {
        self.affine.out_dim
    }

    /// Plain affine map on raw features (zero mean, unit spread).
    pub fn from_affine(affine: Affine) -> Self {
        let k = affine.in_dim;
        Self {
            affine,
            standardization: Standardization {
                mu: vec![0.0; k],
                sigma: vec![1.0; k],
                dropped: Vec::new(),
            },
        }
    }
}

pub fn fit_a_to_v(pairs: &[(Vec<f64>, DrivingVector)]) -> Result<(AudioToVecMap, FitReport)> {
    let xs: Vec<Vec<f64>> = pairs.iter().map(|(a, _)| a.clone()).collect();
    let ys: Vec<Vec<f64>> = pairs.iter().map(|(_, v)| v.0.iter().map(|&x| x as f64).collect()).collect();
    fit_a_to_v_f64(&xs, &ys)
}

/// [`fit_a_to_v`] on f64 targets.
pub fn fit_a_to_v_f64(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(AudioToVecMap, FitReport)> {
    let (k, _) = check_pairs(xs, ys, 1, "a->v fit")?;
    let (mu, sigma) = column_stats(xs, k);
    let mut report = FitReport {
        n_samples: xs.len(),
        ..Default::default()
    };
    let dropped: Vec<usize> = (0..k).filter(|&i| is_constant(sigma[i], mu[i])).collect();
    if !dropped.is_empty() {
        report.warn(format!("{} constant audio feature(s) dropped: {dropped:?}", dropped.len()));
    }
    let z = standardize(xs, &mu, &sigma);
    let (mut affine, rank) = least_squares(&z, ys)?;
    report.rank = rank;
    for row in affine.weight.chunks_mut(k) {
        for &i in &dropped {
            row[i] = 0.0;
        }
    }
    let map = AudioToVecMap {
        affine,
        standardization: Standardization { mu, sigma, dropped },
    };
    map.affine.check_finite("fitted a->v map")?;
    report.train_l1 = mean_l1(
        xs.iter().map(|a| apply_a_to_v(&map, a, true).expect("fit dims")),
        ys,
    );
    Ok((map, report))
}

/// Evaluates `f_{a->v}`. With `normalize` the features are standardized as
/// at fit time; without it the raw features meet the standardized-space
/// weights directly, which amplifies them.
pub fn apply_a_to_v(map: &AudioToVecMap, a: &[f64], normalize: bool) -> Result<Vec<f64>> {
    let st = &map.standardization;
    let x: Vec<f64> = if normalize {
        if a.len() != map.audio_dim() {
            return Err(Error::DimMismatch {
                expected: map.audio_dim(),
                got: a.len(),
            });
        }
        a.iter()
            .zip(&st.mu)
            .zip(&st.sigma)
            .map(|((v, m), s)| if is_constant(*s, *m) { 0.0 } else { (v - m) / s })
            .collect()
    } else {
        a.to_vec()
    };
    map.affine.apply(&x)
}

/// Pose driving: `v_source + f_{p->v}(p_driving - p_source)`, constant term
/// included.
pub fn pose_drive_vector(
    v_source: &[f64],
    f_vp: &VecToPoseMap,
    f_pv: &PoseToVecMap,
    p_driving: &[f64],
) -> Result<Vec<f64>> {
    let p_source = predict_pose(f_vp, v_source)?;
    if p_driving.len() != p_source.len() {
        return Err(Error::DimMismatch {
            expected: p_source.len(),
            got: p_driving.len(),
        });
    }
    let dp: Vec<f64> = p_driving.iter().zip(&p_source).map(|(a, b)| a - b).collect();
    let delta = f_pv.apply(&dp)?;
    add_vec(v_source, &delta)
}

/// `v_source + f_{a->v}(a_d) - f_{a->v}(a_s) + f_{p->v}(p_audio - p_source)`
/// with `p_audio = f_{v->p}(f_{a->v}(a_d))`; audio enters unnormalized.
pub fn audio_drive_vector(
    v_source: &[f64],
    maps: (&AudioToVecMap, &VecToPoseMap, &PoseToVecMap),
    a_driving: &[f64],
    a_source: &[f64],
) -> Result<Vec<f64>> {
    let (f_av, f_vp, f_pv) = maps;
    let p_source = predict_pose(f_vp, v_source)?;
    let va_d = apply_a_to_v(f_av, a_driving, false)?;
    let va_s = apply_a_to_v(f_av, a_source, false)?;
    let p_audio = predict_pose(f_vp, &va_d)?;
    let dp: Vec<f64> = p_audio.iter().zip(&p_source).map(|(a, b)| a - b).collect();
    let pose_term = f_pv.apply(&dp)?;
    let mut v = add_vec(v_source, &va_d)?;
    v = add_vec(&v, &va_s.iter().map(|x| -x).collect::<Vec<_>>())?;
    add_vec(&v, &pose_term)
}

fn add_vec(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

/// The fitted maps of one model; any may be missing.
#[derive(Clone, Debug, Default)]
pub struct ControlMaps {
    pub v_to_p: Option<VecToPoseMap>,
    pub p_to_v: Option<PoseToVecMap>,
    pub a_to_v: Option<AudioToVecMap>,
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    kind: String,
    weight: Vec<f64>,
    bias: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose_dim: Option<usize>,
    vec_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    audio_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    standardization: Option<Standardization>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batchnorm: Option<BatchNorm1d>,
}

fn write_json(path: &Path, v: &MapFile) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path, kind: &str) -> Result<Option<MapFile>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: MapFile = serde_json::from_str(&text)?;
    if f.kind != kind {
        return Err(Error::Config(format!("{} holds a `{}` map, expected `{kind}`", path.display(), f.kind)));
    }
    Ok(Some(f))
}

fn dim(d: Option<usize>, what: &str) -> Result<usize> {
    d.ok_or_else(|| Error::Config(format!("map file lacks {what}")))
}

impl ControlMaps {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(m) = &self.v_to_p {
            let a = &m.affine;
            write_json(
                &dir.join(V_TO_P_FILE),
                &MapFile {
                    kind: "v_to_p".into(),
                    weight: a.weight.clone(),
                    bias: a.bias.clone(),
                    pose_dim: Some(a.out_dim),
                    vec_dim: a.in_dim,
                    audio_dim: None,
                    standardization: None,
                    batchnorm: None,
                },
            )?;
        }
        if let Some(m) = &self.p_to_v {
            let a = &m.linear;
            write_json(
                &dir.join(P_TO_V_FILE),
                &MapFile {
                    kind: "p_to_v".into(),
                    weight: a.weight.clone(),
                    bias: a.bias.clone(),
                    pose_dim: Some(a.in_dim),
                    vec_dim: a.out_dim,
                    audio_dim: None,
                    standardization: None,
                    batchnorm: Some(m.batchnorm.clone()),
                },
            )?;
        }
        if let Some(m) = &self.a_to_v {
            let a = &m.affine;
            write_json(
                &dir.join(A_TO_V_FILE),
                &MapFile {
                    kind: "a_to_v".into(),
                    weight: a.weight.clone(),
                    bias: a.bias.clone(),
                    pose_dim: None,
                    vec_dim: a.out_dim,
                    audio_dim: Some(a.in_dim),
                    standardization: Some(m.standardization.clone()),
                    batchnorm: None,
                },
            )?;
        }
        Ok(())
    }

    /// Loads whichever map files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "maps directory not found"),
            ));
        }
        let mut maps = Self::default();
        if let Some(f) = read_json(&dir.join(V_TO_P_FILE), "v_to_p")? {
            let affine = Affine::new(dim(f.pose_dim, "pose_dim")?, f.vec_dim, f.weight, f.bias)?;
            maps.v_to_p = Some(VecToPoseMap { affine });
        }
        if let Some(f) = read_json(&dir.join(P_TO_V_FILE), "p_to_v")? {
            let linear = Affine::new(f.vec_dim, dim(f.pose_dim, "pose_dim")?, f.weight, f.bias)?;
            let batchnorm = f.batchnorm.ok_or_else(|| Error::Config("p_to_v map lacks batchnorm".into()))?;
            let d = linear.out_dim;
            if [&batchnorm.gamma, &batchnorm.beta, &batchnorm.running_mean, &batchnorm.running_var]
                .iter()
                .any(|v| v.len() != d)
            {
                return Err(Error::Shape("p_to_v batchnorm length differs from vec_dim".into()));
            }
            maps.p_to_v = Some(PoseToVecMap { linear, batchnorm });
        }
        if let Some(f) = read_json(&dir.join(A_TO_V_FILE), "a_to_v")? {
            let affine = Affine::new(f.vec_dim, dim(f.audio_dim, "audio_dim")?, f.weight, f.bias)?;
            let standardization = f
                .standardization
                .ok_or_else(|| Error::Config("a_to_v map lacks standardization".into()))?;
            if standardization.mu.len() != affine.in_dim || standardization.sigma.len() != affine.in_dim {
                return Err(Error::Shape("a_to_v standardization length differs from audio_dim".into()));
            }
            maps.a_to_v = Some(AudioToVecMap {
                affine,
                standardization,
            });
        }
        Ok(maps)
    }

    pub fn pose_maps(&self) -> Result<(&VecToPoseMap, &PoseToVecMap)> {
        match (&self.v_to_p, &self.p_to_v) {
            (Some(a), Some(b)) => Ok((a, b)),
            (None, _) => Err(Error::Unfitted("v_to_p".into())),
            (_, None) => Err(Error::Unfitted("p_to_v".into())),
        }
    }

    pub fn audio_maps(&self) -> Result<(&AudioToVecMap, &VecToPoseMap, &PoseToVecMap)> {
        let (vp, pv) = self.pose_maps()?;
        let av = self.a_to_v.as_ref().ok_or_else(|| Error::Unfitted("a_to_v".into()))?;
        Ok((av, vp, pv))
    }
}

fn to_f64(v: &DrivingVector) -> Vec<f64> {
    v.0.iter().map(|&x| x as f64).collect()
}

fn decode_vectors(
    emb: &EmbeddingNetwork,
    drv: &DrivingNetwork,
    sources: &[FaceFrame],
    vectors: &[Vec<f64>],
) -> Result<Vec<FaceFrame>> {
    let embedded = embed_multi(emb, sources)?;
    let d = drv.config().driving_vector_dim;
    let mut out = Vec::with_capacity(vectors.len());
    for v in vectors {
        if v.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: v.len(),
            });
        }
        let t = Tensor::from_vec([1, d, 1, 1], v.iter().map(|&x| x as f32).collect())?;
        let (_, gen) = drive_decode_batch(drv, &t, embedded.tensor(), None)?;
        out.push(FaceFrame::new(gen)?);
    }
    Ok(out)
}

fn source_vector(drv: &DrivingNetwork, sources: &[FaceFrame]) -> Result<Vec<f64>> {
    let first = sources.first().ok_or_else(|| Error::Empty("no source frames".into()))?;
    Ok(to_f64(&drive_encode(drv, first)?))
}

/// Generates the sources' identity at each requested pose.
pub fn drive_with_pose(
    emb: &EmbeddingNetwork,
    drv: &DrivingNetwork,
    maps: &ControlMaps,
    sources: &[FaceFrame],
    poses: &[PoseCode],
) -> Result<Vec<FaceFrame>> {
    let (vp, pv) = maps.pose_maps()?;
    let v_source = source_vector(drv, sources)?;
    let vectors = poses
        .iter()
        .map(|p| pose_drive_vector(&v_source, vp, pv, p))
        .collect::<Result<Vec<_>>>()?;
    decode_vectors(emb, drv, sources, &vectors)
}

/// Generates the sources' identity driven by each audio feature in turn.
pub fn drive_with_audio(
    emb: &EmbeddingNetwork,
    drv: &DrivingNetwork,
    maps: &ControlMaps,
    sources: &[FaceFrame],
    a_driving: &[Vec<f64>],
    a_source: &[f64],
) -> Result<Vec<FaceFrame>> {
    let audio = maps.audio_maps()?;
    let v_source = source_vector(drv, sources)?;
    let vectors = a_driving
        .iter()
        .map(|a| audio_drive_vector(&v_source, audio, a, a_source))
        .collect::<Result<Vec<_>>>()?;
    decode_vectors(emb, drv, sources, &vectors)
}

/// Driving vectors of every labelled frame in `split`, with the frames.
pub struct EncodedFrames {
    pub frames: Vec<FrameRef>,
    pub vectors: Vec<DrivingVector>,
}

pub fn encode_split(drv: &DrivingNetwork, index: &DatasetIndex, split: Split) -> Result<EncodedFrames> {
    let frames: Vec<FrameRef> = index
        .frames_in(split)
        .into_iter()
        .filter(|r| index.labels(r).is_some())
        .collect();
    let cache = FrameCache::load(index, &[split])?;
    let mut vectors = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(32) {
        let batch = cache.batch(chunk)?;
        let v = drive_encode_batch(drv, &batch)?;
        let d = v.item_len();
        vectors.extend(v.data().chunks(d).map(|c| DrivingVector(c.to_vec())));
    }
    Ok(EncodedFrames { frames, vectors })
}

/// Ground-truth pose code of a labelled frame.
pub fn frame_pose(index: &DatasetIndex, r: &FrameRef) -> Result<PoseCode> {
    let labels = index
        .labels(r)
        .ok_or_else(|| Error::Dataset(format!("frame {r:?} has no labels")))?;
    Ok(labels.pose[r.frame].iter().map(|&x| x as f64).collect())
}

pub fn frame_audio(index: &DatasetIndex, r: &FrameRef) -> Result<Vec<f64>> {
    let labels = index
        .labels(r)
        .ok_or_else(|| Error::Dataset(format!("frame {r:?} has no labels")))?;
    let a = labels
        .audio_features
        .get(r.frame)
        .ok_or_else(|| Error::Dataset(format!("frame {r:?} has no audio features")))?;
    if a.len() != AUDIO_DIM {
        return Err(Error::DimMismatch {
            expected: AUDIO_DIM,
            got: a.len(),
        });
    }
    Ok(a.iter().map(|&x| x as f64).collect())
}

/// Fits the two pose maps on the train split: `f_{v->p}` on ground-truth
/// poses, `f_{p->v}` on poses predicted by `f_{v->p}`.
pub fn fit_pose_maps(
    drv: &DrivingNetwork,
    index: &DatasetIndex,
    cfg: &MapFitConfig,
) -> Result<(VecToPoseMap, PoseToVecMap, Vec<(String, FitReport)>)> {
    let enc = encode_split(drv, index, Split::Train)?;
    if enc.frames.len() < 2 {
        return Err(Error::Dataset("fitting control maps needs at least 2 labelled train frames".into()));
    }
    let mut vp_pairs = Vec::with_capacity(enc.frames.len());
    for (r, v) in enc.frames.iter().zip(&enc.vectors) {
        let p = frame_pose(index, r)?;
        if p.len() != POSE_DIM {
            return Err(Error::DimMismatch {
                expected: POSE_DIM,
                got: p.len(),
            });
        }
        vp_pairs.push((v.clone(), p));
    }
    let (vp, r1) = fit_v_to_p(&vp_pairs, cfg)?;
    let pv_pairs = enc
        .vectors
        .iter()
        .map(|v| Ok((predict_pose(&vp, &to_f64(v))?, v.clone())))
        .collect::<Result<Vec<_>>>()?;
    let (pv, r2) = fit_p_to_v(&pv_pairs, cfg)?;
    Ok((vp, pv, vec![("v_to_p".to_string(), r1), ("p_to_v".to_string(), r2)]))
}

/// Fits `f_{a->v}` on the train split's audio features.
pub fn fit_audio_map(drv: &DrivingNetwork, index: &DatasetIndex) -> Result<(AudioToVecMap, FitReport)> {
    let enc = encode_split(drv, index, Split::Train)?;
    let audio: Vec<_> = enc
        .frames
        .iter()
        .zip(&enc.vectors)
        .filter_map(|(r, v)| frame_audio(index, r).ok().map(|a| (a, v.clone())))
        .collect();
    if audio.is_empty() {
        return Err(Error::Dataset("no audio features in the train split".into()));
    }
    fit_a_to_v(&audio)
}

/// Fits all three maps; the audio map is skipped when the data has no
/// audio features.
pub fn fit_control_maps(
    drv: &DrivingNetwork,
    index: &DatasetIndex,
    cfg: &MapFitConfig,
) -> Result<(ControlMaps, Vec<(String, FitReport)>)> {
    let (vp, pv, mut reports) = fit_pose_maps(drv, index, cfg)?;
    let av = match fit_audio_map(drv, index) {
        Ok((m, r)) => {
            reports.push(("a_to_v".to_string(), r));
            Some(m)
        }
        Err(Error::Dataset(msg)) => {
            log::warn!("{msg}; a->v map not fitted");
            None
        }
        Err(e) => return Err(e),
    };
    Ok((
        ControlMaps {
            v_to_p: Some(vp),
            p_to_v: Some(pv),
            a_to_v: av,
        },
        reports,
    ))
}

#[cfg(test)]
mod tests;
