//! Photometric and identity content losses.

mod comparator;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use comparator::{
    train_identity_comparator, ComparatorConfig, ComparatorReport, ComparatorTrainConfig, IdentityComparator, Layer,
    StageSpec, COMPARATOR_MAGIC, HIGH, LOW_HIGH, N_STAGES,
};

use crate::diffops::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::FaceFrame;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const TARGET_RATIO_SAME: f64 = 1.0;
pub const TARGET_RATIO_DIFF: f64 = 0.1;
/// Lower bound on every EMA so the weights stay finite.
pub const EMA_FLOOR: f64 = 1e-8;

/// Mean absolute difference over all elements.
pub fn photometric_l1(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("photometric_l1 of {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Empty("photometric_l1 of empty images".into()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Parses stage names such as `"Conv6"`.
pub fn parse_layers<S: AsRef<str>>(names: &[S]) -> Result<Vec<Layer>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// Per-layer mean absolute difference of comparator activations, in a graph.
pub fn content_loss_graph<T: Real>(
    g: &mut Graph<T>,
    cmp: &IdentityComparator<T>,
    p: &[Var],
    a: Var,
    b: Var,
    layers: &[Layer],
) -> Result<Vec<(Layer, Var)>> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Shape(format!(
            "content loss of {:?} and {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    for &l in layers {
        cmp.check_layer(l)?;
    }
    let Some(last) = layers.iter().map(|l| l.stage()).max() else {
        return Ok(Vec::new());
    };
    let fa = cmp.features_graph(g, p, a, last);
    let fb = cmp.features_graph(g, p, b, last);
    Ok(layers
        .iter()
        .map(|&l| (l, g.mean_abs_diff(fa[l.stage()], fb[l.stage()])))
        .collect())
}

/// Per-layer content loss between two image batches.
pub fn content_loss_tensors(
    cmp: &IdentityComparator,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    layers: &[Layer],
) -> Result<BTreeMap<Layer, f64>> {
    let mut g = Graph::new(false);
    let p = cmp.store().vars(&mut g, false);
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let terms = content_loss_graph(&mut g, cmp, &p, va, vb, layers)?;
    Ok(terms.into_iter().map(|(l, v)| (l, g.scalar(v) as f64)).collect())
}

pub fn content_loss(cmp: &IdentityComparator, a: &FaceFrame, b: &FaceFrame, layers: &[Layer]) -> Result<BTreeMap<Layer, f64>> {
    content_loss_tensors(cmp, a.tensor(), b.tensor(), layers)
}

/// Running magnitudes of the photometric term and of each content layer,
/// used to rescale the layer terms toward fixed ratios of the photometric
/// term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeightState {
    pub decay: f64,
    pub target_ratio_same: f64,
    pub target_ratio_diff: f64,
    pub photometric: Option<f64>,
    pub same: BTreeMap<String, f64>,
    pub diff: BTreeMap<String, f64>,
}

impl Default for LossWeightState {
    fn default() -> Self {
        Self::new(DEFAULT_EMA_DECAY)
    }
}

/// One EMA step; the first observation initializes the average.
pub fn ema_update(prev: Option<f64>, obs: f64, decay: f64) -> f64 {
    let next = match prev {
        None => obs,
        Some(p) => decay * p + (1.0 - decay) * obs,
    };
    next.max(EMA_FLOOR)
}

impl LossWeightState {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            target_ratio_same: TARGET_RATIO_SAME,
            target_ratio_diff: TARGET_RATIO_DIFF,
            photometric: None,
            same: BTreeMap::new(),
            diff: BTreeMap::new(),
        }
    }

    /// Every average already set to `value`.
    pub fn seeded(decay: f64, value: f64) -> Self {
        let mut s = Self::new(decay);
        s.photometric = Some(value.max(EMA_FLOOR));
        for l in LOW_HIGH {
            s.same.insert(l.to_string(), value.max(EMA_FLOOR));
        }
        for l in HIGH {
            s.diff.insert(l.to_string(), value.max(EMA_FLOOR));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {}", self.decay)));
        }
        Ok(())
    }

    /// Folds the raw magnitudes of one batch into the averages.
    pub fn update(&mut self, photometric: f64, same: &[(Layer, f64)], diff: &[(Layer, f64)]) {
        self.photometric = Some(ema_update(self.photometric, photometric, self.decay));
        for (map, obs) in [(&mut self.same, same), (&mut self.diff, diff)] {
            for &(l, v) in obs {
                let key = l.to_string();
                let next = ema_update(map.get(&key).copied(), v, self.decay);
                map.insert(key, next);
            }
        }
    }

    fn weight(&self, ratio: f64, ema: Option<f64>) -> f64 {
        let p = self.photometric.unwrap_or(1.0);
        ratio * p / ema.unwrap_or(p).max(EMA_FLOOR)
    }

    pub fn same_weight(&self, l: Layer) -> f64 {
        self.weight(self.target_ratio_same, self.same.get(&l.to_string()).copied())
    }

    pub fn diff_weight(&self, l: Layer) -> f64 {
        self.weight(self.target_ratio_diff, self.diff.get(&l.to_string()).copied())
    }
}

/// Frames of one training triplet: a source and a same-video driving frame
/// of identity A, and a driving frame of another identity.
#[derive(Clone, Debug)]
pub struct TripletSample {
    pub s_a: FaceFrame,
    pub d_a: FaceFrame,
    pub d_r: FaceFrame,
}

/// The second-stage objective as graph nodes.
pub struct Stage2Terms {
    pub total: Var,
    /// Weighted addends; their sum is `total`.
    pub components: Vec<(String, Var)>,
}

/// Builds the total loss, updating `state` from this batch's raw layer
/// magnitudes before weighting. Comparator parameters must be frozen inputs.
#[allow(clippy::too_many_arguments)]
pub fn stage2_graph<T: Real>(
    g: &mut Graph<T>,
    cmp: &IdentityComparator<T>,
    p: &[Var],
    s_a: Var,
    d_a: Var,
    g_da: Var,
    g_dr: Var,
    state: &mut LossWeightState,
) -> Result<Stage2Terms> {
    for (x, what) in [(d_a, "d_A"), (g_da, "g_dA"), (g_dr, "g_dR")] {
        if g.value(x).shape() != g.value(s_a).shape() {
            return Err(Error::Shape(format!(
                "{what} has shape {:?}, source has {:?}",
                g.value(x).shape(),
                g.value(s_a).shape()
            )));
        }
    }
    let photo = g.mean_abs_diff(g_da, d_a);
    let same = content_loss_graph(g, cmp, p, g_da, d_a, &LOW_HIGH)?;
    let diff = content_loss_graph(g, cmp, p, g_dr, s_a, &HIGH)?;

    let raw = |g: &Graph<T>, terms: &[(Layer, Var)]| -> Vec<(Layer, f64)> {
        terms.iter().map(|&(l, v)| (l, g.scalar(v).to_f64().unwrap_or(f64::NAN))).collect()
    };
    let photo_raw = g.scalar(photo).to_f64().unwrap_or(f64::NAN);
    let (same_raw, diff_raw) = (raw(g, &same), raw(g, &diff));
    if !photo_raw.is_finite() || same_raw.iter().chain(&diff_raw).any(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite("stage-II loss term".into()));
    }
    state.update(photo_raw, &same_raw, &diff_raw);

    let mut components = vec![("photometric".to_string(), photo)];
    let mut total = photo;
    for (prefix, terms, is_same) in [("same", &same, true), ("diff", &diff, false)] {
        for &(l, v) in terms {
            let w = if is_same { state.same_weight(l) } else { state.diff_weight(l) };
            let addend = g.scale(v, T::lit(w));
            total = g.add(total, addend);
            components.push((format!("{prefix}.{l}"), addend));
        }
    }
    Ok(Stage2Terms { total, components })
}

/// Evaluates the second-stage objective on frames; returns the total and
/// every weighted addend.
pub fn stage2_loss(
    triplet: &TripletSample,
    g_da: &FaceFrame,
    g_dr: &FaceFrame,
    cmp: &IdentityComparator,
    state: &mut LossWeightState,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut g = Graph::new(false);
    let p = cmp.store().vars(&mut g, false);
    let vars = [
        triplet.s_a.tensor(),
        triplet.d_a.tensor(),
        g_da.tensor(),
        g_dr.tensor(),
    ]
    .map(|t| g.input(t.clone()));
    let d_r_shape = triplet.d_r.tensor().shape();
    if d_r_shape != triplet.s_a.tensor().shape() {
        return Err(Error::Shape(format!("d_R has shape {d_r_shape:?}")));
    }
    let terms = stage2_graph(&mut g, cmp, &p, vars[0], vars[1], vars[2], vars[3], state)?;
    let components = terms
        .components
        .iter()
        .map(|(k, v)| (k.clone(), g.scalar(*v) as f64))
        .collect();
    Ok((g.scalar(terms.total) as f64, components))
}

#[cfg(test)]
mod tests;
