//! The two-stage curriculum: photometric pretraining, then fine-tuning with
//! identity content losses.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{sample_pair, sample_triplet, DatasetIndex, FrameCache, FrameRef, PairRef, Split};
use crate::diffops::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{stage2_graph, IdentityComparator, LossWeightState};
use crate::networks::{
    forward_graph, reconstruct_batch, save_checkpoint, DrivingNetwork, EmbeddingNetwork, FlowHooks, ParamStore,
    TrainingMeta,
};
use crate::tensor::Tensor;

pub const STAGE1_LR: f64 = 1e-3;
pub const STAGE2_LR: f64 = 1e-4;
pub const CHECKPOINT_FILE: &str = "checkpoint.x2f";
pub const METRICS_FILE: &str = "metrics.ndjson";
/// Stream offset separating the validation draw from the training draw.
const VAL_STREAM: u64 = 0x7661_6c00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub window: usize,
    pub min_rel_improve: f64,
    pub decay_factor: f64,
    pub lr_floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            window: 5,
            min_rel_improve: 0.01,
            decay_factor: 10.0,
            lr_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    /// Zero freezes the model entirely, batch-norm statistics included.
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Number of fixed validation pairs (or triplets) scored per eval.
    pub val_samples: usize,
    pub plateau: PlateauConfig,
    pub seed: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            lr: STAGE1_LR,
            momentum: 0.9,
            batch_size: 8,
            max_steps: 2000,
            eval_every: 100,
            val_samples: 32,
            plateau: PlateauConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            clip_norm: Some(10.0),
            ema_decay: crate::losses::DEFAULT_EMA_DECAY,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            lr: STAGE2_LR,
            ..Self::stage1()
        }
    }

    pub fn for_stage(stage: u8) -> Self {
        if stage == 2 {
            Self::stage2()
        } else {
            Self::stage1()
        }
    }

    /// Reads a JSON file; absent fields take the defaults of the stage the
    /// file names (stage 1 when unnamed).
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_value(serde_json::from_str(&text)?)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let stage = value.get("stage").and_then(|s| s.as_u64()).unwrap_or(1) as u8;
        let mut base = serde_json::to_value(Self::for_stage(stage))?;
        if let (Some(b), Some(o)) = (base.as_object_mut(), value.as_object()) {
            for (k, v) in o {
                b.insert(k.clone(), v.clone());
            }
        }
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.stage, 1 | 2) {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.val_samples == 0 || self.eval_every == 0 {
            return bad("batch_size, val_samples and eval_every must be positive".into());
        }
        let p = &self.plateau;
        if p.window == 0 || p.decay_factor <= 1.0 || p.lr_floor < 0.0 || p.min_rel_improve < 0.0 {
            return bad(format!("invalid plateau settings {p:?}"));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0 || c.is_nan()) {
            return bad("clip_norm must be positive".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        Ok(())
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v`. Absent gradients count
/// as zero. Nothing is modified when any gradient is non-finite.
pub fn sgd_momentum_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
    grads: &[Option<Tensor<f32>>],
    velocity: &mut [Tensor<f32>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor<f32>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} momentum buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if velocity[i].shape() != p.shape() || g.as_ref().is_some_and(|g| g.shape() != p.shape()) {
            return Err(Error::Shape(format!("parameter {i} disagrees with its gradient or buffer")));
        }
        if g.as_ref().is_some_and(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        match g {
            Some(g) => {
                for ((w, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = mu * *v + g;
                    *w -= lr * *v;
                }
            }
            None => {
                for (w, v) in p.data_mut().iter_mut().zip(v.data_mut()) {
                    *v *= mu;
                    *w -= lr * *v;
                }
            }
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// The learning rate after one evaluation. `history` holds the validation
/// losses since the last decay, oldest first: when the best of the final
/// `window` entries is not at least `min_rel_improve` below the best before
/// them, the rate drops by `decay_factor`, clamped to the floor.
pub fn lr_plateau_step(history: &[f64], lr: f64, cfg: &PlateauConfig) -> f64 {
    if history.len() <= cfg.window || lr <= cfg.lr_floor {
        return lr;
    }
    let (prior, recent) = history.split_at(history.len() - cfg.window);
    let best = |xs: &[f64]| xs.iter().copied().fold(f64::INFINITY, f64::min);
    let (prior_best, recent_best) = (best(prior), best(recent));
    if recent_best < prior_best * (1.0 - cfg.min_rel_improve) {
        lr
    } else {
        (lr / cfg.decay_factor).max(cfg.lr_floor)
    }
}

/// Mutable optimizer state of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub velocity_embedding: Vec<Tensor<f32>>,
    pub velocity_driving: Vec<Tensor<f32>>,
    pub loss_weights: Option<LossWeightState>,
    pub history: Vec<f64>,
    /// Index into `history` where the current plateau window began.
    pub window_start: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, emb: &EmbeddingNetwork, drv: &DrivingNetwork) -> Self {
        let zeros = |s: &ParamStore| s.params().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            lr: cfg.lr,
            velocity_embedding: zeros(emb.store()),
            velocity_driving: zeros(drv.store()),
            loss_weights: (cfg.stage == 2).then(|| LossWeightState::new(cfg.ema_decay)),
            history: Vec::new(),
            window_start: 0,
        }
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_lr: f64,
    /// Validation L1 before the first update.
    pub initial_val_l1: f64,
    pub final_val_l1: f64,
    pub val_history: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

struct MetricsLog(BufWriter<File>);

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self(BufWriter::new(f)))
    }

    fn record(&mut self, v: serde_json::Value) -> Result<()> {
        let io = |e| Error::io("metrics log", e);
        writeln!(self.0, "{v}").map_err(io)?;
        self.0.flush().map_err(io)
    }
}

/// Mean same-video reconstruction L1 over fixed validation pairs, in
/// inference mode.
pub fn validation_l1(
    emb: &EmbeddingNetwork,
    drv: &DrivingNetwork,
    cache: &FrameCache,
    pairs: &[PairRef],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let src = cache.batch(&chunk.iter().map(|p| p.source).collect::<Vec<_>>())?;
        let dst = cache.batch(&chunk.iter().map(|p| p.driving).collect::<Vec<_>>())?;
        let gen = reconstruct_batch(emb, drv, &src, &dst)?;
        total += crate::losses::photometric_l1(&gen, &dst)? * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn validation_pairs(index: &DatasetIndex, cfg: &TrainConfig) -> Result<Vec<PairRef>> {
    let split = if index.identities_in(Split::Val).is_empty() {
        log::warn!("no validation identities; validating on train pairs");
        Split::Train
    } else {
        Split::Val
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_STREAM);
    (0..cfg.val_samples).map(|_| sample_pair(index, split, &mut rng)).collect()
}

fn collect_grads(grads: &mut Gradients<f32>, vars: &[Var]) -> Vec<Option<Tensor<f32>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

/// What one optimizer step computed.
struct StepResult {
    loss: f64,
    components: BTreeMap<String, f64>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    index: &'a DatasetIndex,
    cache: FrameCache,
    out_dir: &'a Path,
    rng: ChaCha8Rng,
    state: TrainState,
    val_pairs: Vec<PairRef>,
}

impl Trainer<'_> {
    fn apply(
        &mut self,
        emb: &mut EmbeddingNetwork,
        drv: &mut DrivingNetwork,
        g: &mut Graph<f32>,
        loss: Var,
        pe: &[Var],
        pd: &[Var],
    ) -> Result<()> {
        let mut grads = g.backward(loss);
        let mut all = collect_grads(&mut grads, pe);
        all.extend(collect_grads(&mut grads, pd));
        if let Some(c) = self.cfg.clip_norm {
            let norm = clip_global_norm(&mut all, c);
            log::debug!("step {} gradient norm {norm:.4}", self.state.step);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm at step {}", self.state.step)));
            }
        }
        if self.state.lr == 0.0 {
            return Ok(());
        }
        let gd = all.split_off(pe.len());
        sgd_momentum_step(
            emb.store_mut().params_mut(),
            &all,
            &mut self.state.velocity_embedding,
            self.state.lr,
            self.cfg.momentum,
        )?;
        sgd_momentum_step(
            drv.store_mut().params_mut(),
            &gd,
            &mut self.state.velocity_driving,
            self.state.lr,
            self.cfg.momentum,
        )?;
        let obs = g.take_bn_log();
        emb.absorb_bn(&obs);
        drv.absorb_bn(&obs);
        Ok(())
    }

    fn stage1_step(&mut self, emb: &mut EmbeddingNetwork, drv: &mut DrivingNetwork) -> Result<StepResult> {
        let pairs: Vec<PairRef> = (0..self.cfg.batch_size)
            .map(|_| sample_pair(self.index, Split::Train, &mut self.rng))
            .collect::<Result<_>>()?;
        let src = self.cache.batch(&pairs.iter().map(|p| p.source).collect::<Vec<_>>())?;
        let dst = self.cache.batch(&pairs.iter().map(|p| p.driving).collect::<Vec<_>>())?;
        let mut g = Graph::new(true);
        let pe = emb.store().vars(&mut g, true);
        let pd = drv.store().vars(&mut g, true);
        let (s, d) = (g.input(src), g.input(dst));
        let out = forward_graph(&mut g, emb, &pe, drv, &pd, s, d, &FlowHooks::none());
        let loss = g.mean_abs_diff(out.generated, d);
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.state.step)));
        }
        self.apply(emb, drv, &mut g, loss, &pe, &pd)?;
        Ok(StepResult {
            loss: value,
            components: BTreeMap::from([("photometric".to_string(), value)]),
        })
    }

    fn stage2_step(
        &mut self,
        emb: &mut EmbeddingNetwork,
        drv: &mut DrivingNetwork,
        cmp: &IdentityComparator,
    ) -> Result<StepResult> {
        let triplets = (0..self.cfg.batch_size)
            .map(|_| sample_triplet(self.index, Split::Train, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let pick = |f: fn(&crate::dataset::TripletRef) -> FrameRef| triplets.iter().map(f).collect::<Vec<_>>();
        let s_a = self.cache.batch(&pick(|t| t.s_a))?;
        let d_a = self.cache.batch(&pick(|t| t.d_a))?;
        let d_r = self.cache.batch(&pick(|t| t.d_r))?;

        let mut g = Graph::new(true);
        let pe = emb.store().vars(&mut g, true);
        let pd = drv.store().vars(&mut g, true);
        let pc = cmp.store().vars(&mut g, false);
        let (vs, vda, vdr) = (g.input(s_a), g.input(d_a), g.input(d_r));
        // The embedding of s_A is shared by both generated frames.
        let embed_grid = emb.grid_graph(&mut g, &pe, vs, None);
        let embedded = g.bilinear_sample(vs, embed_grid);
        let generate = |g: &mut Graph<f32>, driving: Var| {
            let v = drv.encode_graph(g, &pd, driving);
            let grid = drv.grid_graph(g, &pd, v, None);
            g.bilinear_sample(embedded, grid)
        };
        let g_da = generate(&mut g, vda);
        let g_dr = generate(&mut g, vdr);
        let weights = self.state.loss_weights.get_or_insert_with(|| LossWeightState::new(self.cfg.ema_decay));
        let terms = stage2_graph(&mut g, cmp, &pc, vs, vda, g_da, g_dr, weights)?;
        let value = g.scalar(terms.total) as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.state.step)));
        }
        let components = terms
            .components
            .iter()
            .map(|(k, v)| (k.clone(), g.scalar(*v) as f64))
            .collect();
        self.apply(emb, drv, &mut g, terms.total, &pe, &pd)?;
        Ok(StepResult {
            loss: value,
            components,
        })
    }

    fn meta(&self) -> TrainingMeta {
        TrainingMeta {
            stage: self.cfg.stage,
            step: self.state.step,
            lr: self.state.lr,
            seed: self.cfg.seed,
        }
    }

    fn checkpoint(&self, emb: &EmbeddingNetwork, drv: &DrivingNetwork) -> Result<PathBuf> {
        let path = self.out_dir.join(CHECKPOINT_FILE);
        save_checkpoint(&path, emb, drv, &self.meta())?;
        Ok(path)
    }
}

/// Runs one curriculum stage in place on `emb`/`drv`, writing the metrics
/// log and checkpoints into `out_dir`. Stage 2 needs the comparator.
pub fn train(
    cfg: &TrainConfig,
    index: &DatasetIndex,
    emb: &mut EmbeddingNetwork,
    drv: &mut DrivingNetwork,
    comparator: Option<&IdentityComparator>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if emb.config() != drv.config() {
        return Err(Error::Config("embedding and driving networks disagree on their config".into()));
    }
    if cfg.stage == 2 && comparator.is_none() {
        return Err(Error::Config("stage 2 needs an identity comparator".into()));
    }
    if index.identities_in(Split::Train).is_empty() {
        return Err(Error::Dataset("no train identities".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cache = FrameCache::load(index, &[Split::Train, Split::Val])?;
    if let Some(r) = index.frames_in(Split::Train).first() {
        let [_, _, h, w] = cache.get(r)?.shape();
        let res = emb.config().resolution;
        if h != res || w != res {
            return Err(Error::ResolutionMismatch {
                expected: res,
                got_w: w,
                got_h: h,
            });
        }
    }
    let mut tr = Trainer {
        cfg,
        index,
        cache,
        out_dir,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        state: TrainState::new(cfg, emb, drv),
        val_pairs: validation_pairs(index, cfg)?,
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut log = MetricsLog::create(&metrics_path)?;
    let validate = |tr: &Trainer, emb: &EmbeddingNetwork, drv: &DrivingNetwork| {
        validation_l1(emb, drv, &tr.cache, &tr.val_pairs, tr.cfg.batch_size)
    };

    let initial = validate(&tr, emb, drv)?;
    let mut val_history = vec![(0, initial)];
    log.record(json!({"kind": "eval", "stage": cfg.stage, "step": 0, "lr": tr.state.lr, "val_l1": initial}))?;
    let mut checkpoint = tr.checkpoint(emb, drv)?;
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut since_eval = 0u64;

    while tr.state.step < cfg.max_steps {
        let result = match (cfg.stage, comparator) {
            (2, Some(cmp)) => tr.stage2_step(emb, drv, cmp),
            _ => tr.stage1_step(emb, drv),
        };
        let result = match result {
            Ok(r) => r,
            Err(e) => {
                log.record(json!({"kind": "abort", "step": tr.state.step, "error": e.to_string()}))?;
                return Err(e);
            }
        };
        tr.state.step += 1;
        since_eval += 1;
        *sums.entry("total".into()).or_default() += result.loss;
        for (k, v) in result.components {
            *sums.entry(k).or_default() += v;
        }

        if tr.state.step % cfg.eval_every == 0 || tr.state.step == cfg.max_steps {
            let val = validate(&tr, emb, drv)?;
            val_history.push((tr.state.step, val));
            tr.state.history.push(val);
            let train: BTreeMap<&String, f64> = sums.iter().map(|(k, v)| (k, v / since_eval as f64)).collect();
            log.record(json!({
                "kind": "eval",
                "stage": cfg.stage,
                "step": tr.state.step,
                "lr": tr.state.lr,
                "train": train,
                "val_l1": val,
            }))?;
            sums.clear();
            since_eval = 0;

            let window = &tr.state.history[tr.state.window_start..];
            let next = lr_plateau_step(window, tr.state.lr, &cfg.plateau);
            if next != tr.state.lr {
                let recent = &window[window.len() - cfg.plateau.window..];
                log.record(json!({
                    "kind": "lr_decay",
                    "step": tr.state.step,
                    "old_lr": tr.state.lr,
                    "new_lr": next,
                    "history_window": window,
                    "recent": recent,
                }))?;
                tr.state.lr = next;
                tr.state.window_start = tr.state.history.len();
            }
        }
        if cfg.checkpoint_every > 0 && tr.state.step % cfg.checkpoint_every == 0 {
            checkpoint = tr.checkpoint(emb, drv)?;
        }
    }
    checkpoint = if tr.state.step > 0 { tr.checkpoint(emb, drv)? } else { checkpoint };
    let final_val_l1 = val_history.last().map_or(initial, |v| v.1);
    Ok(TrainOutcome {
        steps: tr.state.step,
        final_lr: tr.state.lr,
        initial_val_l1: initial,
        final_val_l1,
        val_history,
        checkpoint,
        metrics: metrics_path,
    })
}

/// Photometric-only pretraining.
pub fn train_stage1(
    cfg: &TrainConfig,
    index: &DatasetIndex,
    emb: &mut EmbeddingNetwork,
    drv: &mut DrivingNetwork,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if cfg.stage != 1 {
        return Err(Error::Config(format!("train_stage1 given stage {}", cfg.stage)));
    }
    train(cfg, index, emb, drv, None, out_dir)
}

/// Fine-tuning with identity losses against a frozen comparator.
pub fn train_stage2(
    cfg: &TrainConfig,
    index: &DatasetIndex,
    emb: &mut EmbeddingNetwork,
    drv: &mut DrivingNetwork,
    comparator: &IdentityComparator,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if cfg.stage != 2 {
        return Err(Error::Config(format!("train_stage2 given stage {}", cfg.stage)));
    }
    train(cfg, index, emb, drv, Some(comparator), out_dir)
}

#[cfg(test)]
mod tests;
