use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::container;
use super::{DrivingNetwork, EmbeddingNetwork, NetConfig, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"X2FCKPT1";

/// Provenance of a saved network pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// 0 for untrained weights.
    pub stage: u8,
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
}

/// A loaded network pair.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub embedding: EmbeddingNetwork,
    pub driving: DrivingNetwork,
    pub config: NetConfig,
    pub meta: TrainingMeta,
}

pub fn save_checkpoint(path: &Path, emb: &EmbeddingNetwork, drv: &DrivingNetwork, meta: &TrainingMeta) -> Result<()> {
    if emb.config() != drv.config() {
        return Err(Error::Config("embedding and driving networks disagree on their config".into()));
    }
    let mut manifest = Map::new();
    manifest.insert("net_config".into(), serde_json::to_value(emb.config())?);
    manifest.insert("training_meta".into(), serde_json::to_value(meta)?);
    let tensors: Vec<_> = emb.store().all().chain(drv.store().all()).collect();
    container::write(path, CHECKPOINT_MAGIC, manifest, &tensors)
}

/// Loads a network pair; nothing is returned unless every tensor validates.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut contents = container::read(path, CHECKPOINT_MAGIC)?;
    let config: NetConfig = contents.field("net_config")?;
    let meta: TrainingMeta = contents.field("training_meta")?;
    let mut embedding = EmbeddingNetwork::new(config, 0)?;
    let mut driving = DrivingNetwork::new(config, 0)?;
    fill(embedding.store_mut(), &mut contents)?;
    fill(driving.store_mut(), &mut contents)?;
    contents.finish()?;
    Ok(Checkpoint {
        embedding,
        driving,
        config,
        meta,
    })
}

/// Reads just the manifest metadata of a checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> Result<(NetConfig, TrainingMeta, Value)> {
    let contents = container::read(path, CHECKPOINT_MAGIC)?;
    Ok((
        contents.field("net_config")?,
        contents.field("training_meta")?,
        Value::Object(contents.manifest),
    ))
}

pub(crate) fn fill(store: &mut ParamStore<f32>, contents: &mut container::Contents) -> Result<()> {
    let wanted: Vec<(String, [usize; 4])> = store.all().map(|(n, t)| (n.to_string(), t.shape())).collect();
    for (name, shape) in wanted {
        let t = contents.take(&name, shape)?;
        store.assign(&name, t)?;
    }
    Ok(())
}
