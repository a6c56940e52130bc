//! The embedding and driving warp networks, full-pipeline inference and
//! checkpoint persistence.
//!
//! Both flow heads end in a tanh whose two channels are read directly as
//! absolute sampler coordinates (not offsets from the identity grid).

mod checkpoint;
mod config;
pub(crate) mod container;
pub(crate) mod params;
mod warpnet;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC};
pub use config::NetConfig;
pub use params::ParamStore;
pub(crate) use checkpoint::fill as fill_store;

use crate::diffops::{self, BnObservation, Graph, SamplerGrid, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use warpnet::EncoderDecoder;
pub use warpnet::DecoderParamCount;

/// Per-pixel absolute sampling coordinates emitted by a flow head.
pub type FlowField = SamplerGrid<f32>;

/// An RGB image in `[0, 1]`, stored as a `(1, 3, H, W)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceFrame(Tensor<f32>);

impl FaceFrame {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let [b, c, h, w] = t.shape();
        if b != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("a frame must be (1, 3, H, W), got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    /// (width, height)
    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[3], self.0.shape()[2])
    }
}

/// The warped, identity-bearing face; same layout as [`FaceFrame`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedFace(Tensor<f32>);

impl EmbeddedFace {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        FaceFrame::new(t).map(|f| Self(f.0))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[3], self.0.shape()[2])
    }

    pub fn as_frame(&self) -> FaceFrame {
        FaceFrame(self.0.clone())
    }
}

/// Flattened bottleneck of the driving network.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivingVector(pub Vec<f32>);

impl DrivingVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Grids that replace the flow-head outputs, for exact warp-composition
/// tests. `None` leaves the network output in place.
#[derive(Clone, Debug, Default)]
pub struct FlowHooks<'a, T: Real = f32> {
    pub embed: Option<&'a SamplerGrid<T>>,
    pub drive: Option<&'a SamplerGrid<T>>,
}

impl<T: Real> FlowHooks<'_, T> {
    pub fn none() -> Self {
        Self { embed: None, drive: None }
    }
}

fn hook_var<T: Real>(g: &mut Graph<T>, grid: &SamplerGrid<T>, batch: usize) -> Var {
    let t = grid.tensor();
    if t.batch() == batch {
        return g.input(t.clone());
    }
    let items: Vec<Tensor<T>> = (0..batch).map(|n| t.item(n % t.batch())).collect();
    g.input(Tensor::stack(&items).expect("hook items share a shape"))
}

/// Source frame to embedded face: a U-Net whose flow samples the source.
#[derive(Clone, Debug)]
pub struct EmbeddingNetwork<T: Real = f32> {
    cfg: NetConfig,
    core: EncoderDecoder<T>,
}

impl<T: Real> EmbeddingNetwork<T> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bottleneck = cfg.channels(cfg.n_down() - 1);
        Ok(Self {
            cfg,
            core: EncoderDecoder::build(&cfg, "embedding", true, bottleneck, seed),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.core.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.core.store
    }

    /// Sampler grid `(B, R, R, 2)` for a batch of source frames.
    pub fn grid_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var, hook: Option<&SamplerGrid<T>>) -> Var {
        if let Some(grid) = hook {
            let batch = g.value(x).batch();
            return hook_var(g, grid, batch);
        }
        let enc = self.core.encode(g, p, x);
        let flow = self.core.decode(g, p, *enc.last().expect("at least one stage"), &enc);
        g.flow_to_grid(flow)
    }

    pub fn absorb_bn(&mut self, obs: &[BnObservation<T>]) {
        self.core.absorb(obs);
    }

    pub fn decoder_param_count(&self) -> DecoderParamCount {
        self.core.decoder_param_count()
    }

    pub fn cast<U: Real>(&self) -> EmbeddingNetwork<U> {
        EmbeddingNetwork {
            cfg: self.cfg,
            core: self.core.cast(),
        }
    }
}

/// Driving frame to driving vector to a flow that samples the embedded face.
#[derive(Clone, Debug)]
pub struct DrivingNetwork<T: Real = f32> {
    cfg: NetConfig,
    core: EncoderDecoder<T>,
}

impl<T: Real> DrivingNetwork<T> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            core: EncoderDecoder::build(&cfg, "driving", false, cfg.driving_vector_dim, seed),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.core.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.core.store
    }

    /// Bottleneck activation `(B, driving_vector_dim, 1, 1)`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        *self.core.encode(g, p, x).last().expect("at least one stage")
    }

    /// Sampler grid `(B, R, R, 2)` decoded from driving vectors.
    pub fn grid_graph(&self, g: &mut Graph<T>, p: &[Var], v: Var, hook: Option<&SamplerGrid<T>>) -> Var {
        if let Some(grid) = hook {
            let batch = g.value(v).batch();
            return hook_var(g, grid, batch);
        }
        let flow = self.core.decode(g, p, v, &[]);
        g.flow_to_grid(flow)
    }

    pub fn absorb_bn(&mut self, obs: &[BnObservation<T>]) {
        self.core.absorb(obs);
    }

    pub fn decoder_param_count(&self) -> DecoderParamCount {
        self.core.decoder_param_count()
    }

    pub fn cast<U: Real>(&self) -> DrivingNetwork<U> {
        DrivingNetwork {
            cfg: self.cfg,
            core: self.core.cast(),
        }
    }
}

/// Graph handles of one end-to-end pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub embed_grid: Var,
    pub embedded: Var,
    pub driving_vector: Var,
    pub drive_grid: Var,
    pub generated: Var,
}

/// Builds the full pipeline on `g` for a batch of single-source pairs.
///
/// `pe` and `pd` are the parameter vars of the two networks, as returned by
/// [`ParamStore::vars`].
#[allow(clippy::too_many_arguments)]
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    emb: &EmbeddingNetwork<T>,
    pe: &[Var],
    drv: &DrivingNetwork<T>,
    pd: &[Var],
    source: Var,
    driving: Var,
    hooks: &FlowHooks<'_, T>,
) -> ForwardVars {
    let embed_grid = emb.grid_graph(g, pe, source, hooks.embed);
    let embedded = g.bilinear_sample(source, embed_grid);
    let driving_vector = drv.encode_graph(g, pd, driving);
    let drive_grid = drv.grid_graph(g, pd, driving_vector, hooks.drive);
    let generated = g.bilinear_sample(embedded, drive_grid);
    ForwardVars {
        embed_grid,
        embedded,
        driving_vector,
        drive_grid,
        generated,
    }
}

fn check_frame(cfg: &NetConfig, t: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = t.shape();
    if h != cfg.resolution || w != cfg.resolution {
        return Err(Error::ResolutionMismatch {
            expected: cfg.resolution,
            got_w: w,
            got_h: h,
        });
    }
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    Ok(())
}

fn grid_of(g: &Graph<f32>, v: Var) -> FlowField {
    SamplerGrid::new(g.value(v).clone()).expect("graph grids have a trailing 2")
}

/// Warps one source frame into its embedded face.
pub fn embed_source(net: &EmbeddingNetwork, source: &FaceFrame) -> Result<(FlowField, EmbeddedFace)> {
    embed_source_with(net, source, None)
}

/// [`embed_source`] with an optional injected flow.
pub fn embed_source_with(
    net: &EmbeddingNetwork,
    source: &FaceFrame,
    hook: Option<&FlowField>,
) -> Result<(FlowField, EmbeddedFace)> {
    check_frame(&net.cfg, source.tensor())?;
    let (grids, embedded) = embed_batch(net, source.tensor(), hook)?;
    Ok((SamplerGrid::new(grids)?, EmbeddedFace(embedded)))
}

/// Batched inference-mode embedding; returns (grids, embedded faces).
pub fn embed_batch(
    net: &EmbeddingNetwork,
    sources: &Tensor<f32>,
    hook: Option<&FlowField>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    check_frame(&net.cfg, sources)?;
    let mut g = Graph::new(false);
    let p = net.store().vars(&mut g, false);
    let x = g.input(sources.clone());
    let grid = net.grid_graph(&mut g, &p, x, hook);
    let grid_t = grid_of(&g, grid);
    let embedded = diffops::bilinear_sample(sources, &grid_t)?;
    Ok((grid_t.into_tensor(), embedded))
}

/// Pixelwise mean of the embedded faces of every source.
pub fn embed_multi(net: &EmbeddingNetwork, sources: &[FaceFrame]) -> Result<EmbeddedFace> {
    embed_multi_with(net, sources, None)
}

pub fn embed_multi_with(net: &EmbeddingNetwork, sources: &[FaceFrame], hook: Option<&FlowField>) -> Result<EmbeddedFace> {
    if sources.is_empty() {
        return Err(Error::Empty("embed_multi needs at least one source".into()));
    }
    // One at a time so that every source sees the same inference path as a
    // single-source call.
    let mut faces = Vec::with_capacity(sources.len());
    for s in sources {
        faces.push(embed_source_with(net, s, hook)?.1.into_tensor());
    }
    Ok(EmbeddedFace(exact_mean(&faces)))
}

/// Pixelwise mean that is exact for equal values and independent of order.
pub fn exact_mean(items: &[Tensor<f32>]) -> Tensor<f32> {
    if items.len() == 1 {
        return items[0].clone();
    }
    let mut out = items[0].clone();
    let n = items.len() as f64;
    let mut column = Vec::with_capacity(items.len());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        column.clear();
        column.extend(items.iter().map(|t| t.data()[i]));
        let first = column[0];
        if column.iter().all(|&v| v == first) {
            *o = first;
            continue;
        }
        column.sort_by(f32::total_cmp);
        let sum: f64 = column.iter().map(|&v| v as f64).sum();
        *o = (sum / n) as f32;
    }
    out
}

/// Inference-mode driving vector of one frame.
pub fn drive_encode(net: &DrivingNetwork, driving: &FaceFrame) -> Result<DrivingVector> {
    check_frame(&net.cfg, driving.tensor())?;
    let v = drive_encode_batch(net, driving.tensor())?;
    Ok(DrivingVector(v.into_vec()))
}

/// Batched inference-mode driving vectors, `(B, D, 1, 1)`.
pub fn drive_encode_batch(net: &DrivingNetwork, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_frame(&net.cfg, frames)?;
    let mut g = Graph::new(false);
    let p = net.store().vars(&mut g, false);
    let x = g.input(frames.clone());
    let v = net.encode_graph(&mut g, &p, x);
    let out = g.value(v).clone();
    if !out.all_finite() {
        return Err(Error::NonFinite("driving vector".into()));
    }
    Ok(out)
}

/// Decodes a driving vector into a flow and samples the embedded face.
pub fn drive_decode(net: &DrivingNetwork, v: &DrivingVector, embedded: &EmbeddedFace) -> Result<(FlowField, FaceFrame)> {
    drive_decode_with(net, v, embedded, None)
}

pub fn drive_decode_with(
    net: &DrivingNetwork,
    v: &DrivingVector,
    embedded: &EmbeddedFace,
    hook: Option<&FlowField>,
) -> Result<(FlowField, FaceFrame)> {
    let d = net.cfg.driving_vector_dim;
    if v.len() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: v.len(),
        });
    }
    check_frame(&net.cfg, embedded.tensor())?;
    let vt = Tensor::from_vec([1, d, 1, 1], v.0.clone())?;
    let (grid, generated) = drive_decode_batch(net, &vt, embedded.tensor(), hook)?;
    Ok((SamplerGrid::new(grid)?, FaceFrame(generated)))
}

/// Batched decode; `vectors` is `(B, D, 1, 1)`, `embedded` is `(B, 3, R, R)`.
pub fn drive_decode_batch(
    net: &DrivingNetwork,
    vectors: &Tensor<f32>,
    embedded: &Tensor<f32>,
    hook: Option<&FlowField>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let d = net.cfg.driving_vector_dim;
    if vectors.shape()[1..] != [d, 1, 1] {
        return Err(Error::DimMismatch {
            expected: d,
            got: vectors.item_len(),
        });
    }
    let mut g = Graph::new(false);
    let p = net.store().vars(&mut g, false);
    let v = g.input(vectors.clone());
    let grid = net.grid_graph(&mut g, &p, v, hook);
    let grid_t = grid_of(&g, grid);
    let generated = diffops::bilinear_sample(embedded, &grid_t)?;
    Ok((grid_t.into_tensor(), generated))
}

/// Generated frame with the identity of `sources` and the pose of `driving`.
pub fn x2face_forward(
    emb: &EmbeddingNetwork,
    drv: &DrivingNetwork,
    sources: &[FaceFrame],
    driving: &FaceFrame,
) -> Result<FaceFrame> {
    x2face_forward_with(emb, drv, sources, driving, &FlowHooks::none())
}

pub fn x2face_forward_with(
    emb: &EmbeddingNetwork,
    drv: &DrivingNetwork,
    sources: &[FaceFrame],
    driving: &FaceFrame,
    hooks: &FlowHooks<'_>,
) -> Result<FaceFrame> {
    let embedded = embed_multi_with(emb, sources, hooks.embed)?;
    let v = drive_encode(drv, driving)?;
    Ok(drive_decode_with(drv, &v, &embedded, hooks.drive)?.1)
}

/// Batched single-source reconstruction in inference mode.
pub fn reconstruct_batch(
    emb: &EmbeddingNetwork,
    drv: &DrivingNetwork,
    sources: &Tensor<f32>,
    driving: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    if sources.batch() != driving.batch() {
        return Err(Error::Precondition("source and driving batches differ".into()));
    }
    let (_, embedded) = embed_batch(emb, sources, None)?;
    let v = drive_encode_batch(drv, driving)?;
    Ok(drive_decode_batch(drv, &v, &embedded, None)?.1)
}
