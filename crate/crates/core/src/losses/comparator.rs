//! A small identity classifier whose intermediate activations serve as the
//! feature space of the identity content losses.
//!
//! Stage `i` (named `Conv{i+1}`) is a 3x3 conv and a ReLU; stages Conv1,
//! Conv3, Conv5 and Conv7 are followed by 2x average pooling. The activation
//! of a stage is taken after its ReLU, before pooling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::dataset::{DatasetIndex, FrameCache, FrameRef, Split};
use crate::diffops::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::container;
use crate::networks::params::{ConvLayer, LinearLayer, ParamStore};
use crate::tensor::{Real, Tensor};

pub const COMPARATOR_MAGIC: &[u8; 8] = b"X2FCMP1\0";
pub const N_STAGES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Layer(usize);

impl Layer {
    pub const CONV1: Layer = Layer(0);
    pub const CONV2: Layer = Layer(1);
    pub const CONV3: Layer = Layer(2);
    pub const CONV4: Layer = Layer(3);
    pub const CONV5: Layer = Layer(4);
    pub const CONV6: Layer = Layer(5);
    pub const CONV7: Layer = Layer(6);

    pub fn stage(self) -> usize {
        self.0
    }

    pub fn from_stage(i: usize) -> Self {
        Layer(i)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Conv{}", self.0 + 1)
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("Conv")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| (1..=N_STAGES).contains(n))
            .map(|n| Layer(n - 1))
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

/// Same-identity layers: low and high level.
pub const LOW_HIGH: [Layer; 5] = [Layer::CONV2, Layer::CONV3, Layer::CONV4, Layer::CONV5, Layer::CONV7];
/// Cross-identity layers: high level only.
pub const HIGH: [Layer; 2] = [Layer::CONV6, Layer::CONV7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparatorConfig {
    pub stages: Vec<StageSpec>,
}

impl ComparatorConfig {
    /// Seven 3x3 stages with `base * min(2^i, 8)` channels.
    pub fn standard(base: usize) -> Self {
        let mut c_in = 3;
        let stages = (0..N_STAGES)
            .map(|i| {
                let c_out = base * (1usize << i).min(8);
                let s = StageSpec {
                    c_in,
                    c_out,
                    kernel: 3,
                    pool: i % 2 == 0,
                };
                c_in = c_out;
                s
            })
            .collect();
        Self { stages }
    }
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        Self::standard(16)
    }
}

#[derive(Clone, Debug)]
pub struct IdentityComparator<T: Real = f32> {
    config: ComparatorConfig,
    store: ParamStore<T>,
    convs: Vec<ConvLayer>,
}

impl<T: Real> IdentityComparator<T> {
    /// He-uniform weights and zero biases.
    pub fn new(config: ComparatorConfig, seed: u64) -> Result<Self> {
        if config.stages.is_empty() {
            return Err(Error::Config("comparator needs at least one stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut convs = Vec::new();
        for (i, s) in config.stages.iter().enumerate() {
            let name = format!("comparator.{}", Layer(i));
            let conv = ConvLayer::new(&mut store, &mut rng, &name, s.c_in, s.c_out, s.kernel, 1, s.kernel / 2);
            let gain = T::lit(6f64.sqrt());
            for v in store.param_mut(conv.weight).data_mut() {
                *v = *v * gain;
            }
            store.param_mut(conv.bias).data_mut().fill(T::zero());
            convs.push(conv);
        }
        Ok(Self { config, store, convs })
    }

    pub fn config(&self) -> &ComparatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn n_stages(&self) -> usize {
        self.convs.len()
    }

    pub fn check_layer(&self, l: Layer) -> Result<()> {
        if l.0 < self.convs.len() {
            Ok(())
        } else {
            Err(Error::UnknownLayer(l.to_string()))
        }
    }

    /// Activations of stages `0..=last` for images in `[0, 1]`.
    pub fn features_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var, last: usize) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(last + 1);
        for (s, conv) in self.config.stages.iter().zip(&self.convs).take(last + 1) {
            h = conv.forward(g, p, h);
            h = g.relu(h);
            out.push(h);
            if s.pool {
                h = g.avg_pool2x(h);
            }
        }
        out
    }

    /// Final pooled activation, for the classifier head.
    fn embedding_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let last = self.convs.len() - 1;
        let feats = self.features_graph(g, p, x, last);
        g.global_avg_pool(feats[last])
    }

    pub fn cast<U: Real>(&self) -> IdentityComparator<U> {
        IdentityComparator {
            config: self.config.clone(),
            store: self.store.cast(),
            convs: self.convs.clone(),
        }
    }
}

impl IdentityComparator<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = Map::new();
        manifest.insert("comparator_config".into(), serde_json::to_value(&self.config)?);
        let tensors: Vec<_> = self.store.all().collect();
        container::write(path, COMPARATOR_MAGIC, manifest, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut contents = container::read(path, COMPARATOR_MAGIC)?;
        let config: ComparatorConfig = contents.field("comparator_config")?;
        let mut cmp = Self::new(config, 0)?;
        crate::networks::fill_store(&mut cmp.store, &mut contents)?;
        contents.finish()?;
        Ok(cmp)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparatorTrainConfig {
    pub base_channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Every `heldout_every`-th frame of each video is held out.
    pub heldout_every: usize,
}

impl Default for ComparatorTrainConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            steps: 300,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            heldout_every: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparatorReport {
    pub n_classes: usize,
    pub train_frames: usize,
    pub heldout_frames: usize,
    pub final_train_loss: f64,
    pub heldout_accuracy: f64,
}

/// Trains a comparator as an identity classifier on the train-split
/// identities, then drops the classifier head.
pub fn train_identity_comparator(
    index: &DatasetIndex,
    cfg: &ComparatorTrainConfig,
    seed: u64,
) -> Result<(IdentityComparator, ComparatorReport)> {
    let classes = index.identities_in(Split::Train);
    if classes.len() < 2 {
        return Err(Error::Dataset(format!(
            "identity classification needs at least 2 train identities, found {}",
            classes.len()
        )));
    }
    if cfg.heldout_every < 2 || cfg.batch_size == 0 {
        return Err(Error::Config("heldout_every must be >= 2 and batch_size >= 1".into()));
    }
    let cache = FrameCache::load(index, &[Split::Train])?;
    let mut train: Vec<(FrameRef, usize)> = Vec::new();
    let mut heldout: Vec<(FrameRef, usize)> = Vec::new();
    for r in index.frames_in(Split::Train) {
        let label = classes.iter().position(|&c| c == r.identity).expect("train identity");
        if r.frame % cfg.heldout_every == cfg.heldout_every - 1 {
            heldout.push((r, label));
        } else {
            train.push((r, label));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cmp = IdentityComparator::<f32>::new(ComparatorConfig::standard(cfg.base_channels), seed)?;
    let mut head_store = ParamStore::default();
    let feat_dim = cmp.config.stages.last().expect("stages").c_out;
    let head = LinearLayer::new(&mut head_store, &mut rng, "head", feat_dim, classes.len());
    let n_body = cmp.store.num_params();
    let mut velocity: Vec<Tensor<f32>> = cmp
        .store
        .params()
        .chain(head_store.params())
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]]);
            cursor += 1;
        }
        let refs: Vec<FrameRef> = batch.iter().map(|b| b.0).collect();
        let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
        let x = cache.batch(&refs)?;

        let mut g = Graph::new(true);
        let mut p = cmp.store.vars(&mut g, true);
        let ph = head_store.vars(&mut g, true);
        let xv = g.input(x);
        let emb = cmp.embedding_graph(&mut g, &p, xv);
        let logits = head.forward(&mut g, &ph, emb);
        let loss = g.softmax_cross_entropy(logits, &labels);
        last_loss = g.scalar(loss) as f64;
        if !last_loss.is_finite() {
            return Err(Error::NonFinite("comparator training loss".into()));
        }
        let mut grads = g.backward(loss);
        p.extend(ph);
        let lr = cfg.lr as f32;
        let mu = cfg.momentum as f32;
        for (i, var) in p.iter().enumerate() {
            let Some(grad) = grads.take(*var) else { continue };
            let param = if i < n_body {
                cmp.store.param_mut(i)
            } else {
                head_store.param_mut(i - n_body)
            };
            for ((w, v), gr) in param.data_mut().iter_mut().zip(velocity[i].data_mut()).zip(grad.data()) {
                *v = mu * *v + gr;
                *w -= lr * *v;
            }
        }
    }

    let mut correct = 0;
    for chunk in heldout.chunks(32) {
        let refs: Vec<FrameRef> = chunk.iter().map(|b| b.0).collect();
        let mut g = Graph::new(false);
        let p = cmp.store.vars(&mut g, false);
        let ph = head_store.vars(&mut g, false);
        let xv = g.input(cache.batch(&refs)?);
        let emb = cmp.embedding_graph(&mut g, &p, xv);
        let logits = head.forward(&mut g, &ph, emb);
        let lt = g.value(logits);
        let k = lt.item_len();
        for (row, (_, label)) in lt.data().chunks(k).zip(chunk) {
            let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("classes");
            correct += usize::from(pred == *label);
        }
    }
    let report = ComparatorReport {
        n_classes: classes.len(),
        train_frames: train.len(),
        heldout_frames: heldout.len(),
        final_train_loss: last_loss,
        heldout_accuracy: correct as f64 / heldout.len().max(1) as f64,
    };
    Ok((cmp, report))
}
