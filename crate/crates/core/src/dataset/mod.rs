//! Face-track datasets: on-disk layout, indexing, pair and triplet sampling,
//! and the procedural synthetic generator.
//!
//! Layout: `root/<identity>/<video>/frame_NNNNN.png`, with an optional
//! `labels.json` per video. A root `splits.json` fixes the identity split;
//! without it the split is derived from a seeded shuffle.

pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

pub use synth::{generate_synthetic_dataset, render_synth_frame, SynthConfig, SynthIdentity, SynthPose};

pub const AUDIO_DIM: usize = 256;
pub const POSE_DIM: usize = 3;
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.75, 0.15, 0.10);
pub const SPLIT_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-frame ground truth of one video.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoLabels {
    /// `(tx, ty, rot)` per frame.
    pub pose: Vec<[f32; 3]>,
    /// `(scale, mouth)` per frame.
    #[serde(default)]
    pub nuisance: Vec<[f32; 2]>,
    #[serde(default)]
    pub audio_features: Vec<Vec<f32>>,
}

impl VideoLabels {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    fn validate(&self, n_frames: usize, video: &str) -> Result<()> {
        let bad = |what: &str, len: usize| {
            Err(Error::Dataset(format!(
                "video {video}: {what} has {len} entries for {n_frames} frames"
            )))
        };
        if self.pose.len() != n_frames {
            return bad("pose", self.pose.len());
        }
        if !self.nuisance.is_empty() && self.nuisance.len() != n_frames {
            return bad("nuisance", self.nuisance.len());
        }
        if !self.audio_features.is_empty() && self.audio_features.len() != n_frames {
            return bad("audio_features", self.audio_features.len());
        }
        if let Some(a) = self.audio_features.iter().find(|a| a.len() != AUDIO_DIM) {
            return Err(Error::Dataset(format!(
                "video {video}: audio feature of length {}, expected {AUDIO_DIM}",
                a.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VideoEntry {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub labels: Option<VideoLabels>,
}

#[derive(Clone, Debug)]
pub struct IdentityEntry {
    pub id: String,
    pub split: Split,
    pub videos: Vec<VideoEntry>,
}

/// Position of one frame inside an index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct FrameRef {
    pub identity: usize,
    pub video: usize,
    pub frame: usize,
}

/// Source and driving frame from one video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub source: FrameRef,
    pub driving: FrameRef,
}

/// `s_a` and `d_a` from one video; `d_r` from another identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletRef {
    pub s_a: FrameRef,
    pub d_a: FrameRef,
    pub d_r: FrameRef,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub identities: Vec<IdentityEntry>,
}

impl DatasetIndex {
    pub fn identities_in(&self, split: Split) -> Vec<usize> {
        (0..self.identities.len())
            .filter(|&i| self.identities[i].split == split)
            .collect()
    }

    pub fn video(&self, r: &FrameRef) -> &VideoEntry {
        &self.identities[r.identity].videos[r.video]
    }

    pub fn frame_path(&self, r: &FrameRef) -> &Path {
        &self.video(r).frames[r.frame]
    }

    pub fn labels(&self, r: &FrameRef) -> Option<&VideoLabels> {
        self.video(r).labels.as_ref()
    }

    pub fn load_frame(&self, r: &FrameRef) -> Result<Tensor<f32>> {
        imageio::read_png(self.frame_path(r))
    }

    /// (identities, videos, frames)
    pub fn counts(&self) -> (usize, usize, usize) {
        let videos = self.identities.iter().map(|i| i.videos.len()).sum();
        let frames = self
            .identities
            .iter()
            .flat_map(|i| &i.videos)
            .map(|v| v.frames.len())
            .sum();
        (self.identities.len(), videos, frames)
    }

    /// Every frame of the given split, in index order.
    pub fn frames_in(&self, split: Split) -> Vec<FrameRef> {
        let mut out = Vec::new();
        for identity in self.identities_in(split) {
            for (video, v) in self.identities[identity].videos.iter().enumerate() {
                out.extend((0..v.frames.len()).map(|frame| FrameRef { identity, video, frame }));
            }
        }
        out
    }

    pub fn write_splits(&self) -> Result<()> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for s in [Split::Train, Split::Val, Split::Test] {
            map.insert(s.as_str(), Vec::new());
        }
        for i in &self.identities {
            map.get_mut(i.split.as_str()).expect("all splits present").push(&i.id);
        }
        let path = self.root.join("splits.json");
        fs::write(&path, serde_json::to_vec_pretty(&map)?).map_err(|e| Error::io(&path, e))
    }
}

/// Split assignment for identities in the given (sorted) order.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let (_, fv, ft) = SPLIT_FRACTIONS;
    let mut n_val = (fv * n as f64).round() as usize;
    let mut n_test = (ft * n as f64).round() as usize;
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    if n_val + n_test > n {
        n_val = 0;
        n_test = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank >= n - n_test {
            out[i] = Split::Test;
        } else if rank >= n - n_test - n_val {
            out[i] = Split::Val;
        }
    }
    out
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Scans and validates a dataset directory.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut identities = Vec::new();
    for (id, id_dir) in sorted_subdirs(root)? {
        let mut videos = Vec::new();
        for (vid, v_dir) in sorted_subdirs(&id_dir)? {
            let name = format!("{id}/{vid}");
            let mut frames: Vec<PathBuf> = fs::read_dir(&v_dir)
                .map_err(|e| Error::io(&v_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let f = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                    f.starts_with("frame_") && f.ends_with(".png")
                })
                .collect();
            frames.sort();
            if frames.len() < 2 {
                return Err(Error::Dataset(format!(
                    "video {name} has {} frame(s); at least 2 are required",
                    frames.len()
                )));
            }
            let labels_path = v_dir.join("labels.json");
            let labels = if labels_path.exists() {
                let l = VideoLabels::read(&labels_path)?;
                l.validate(frames.len(), &name)?;
                Some(l)
            } else {
                None
            };
            videos.push(VideoEntry { id: vid, frames, labels });
        }
        if videos.is_empty() {
            return Err(Error::Dataset(format!("identity {id} has no videos")));
        }
        identities.push(IdentityEntry {
            id,
            split: Split::Train,
            videos,
        });
    }
    if identities.is_empty() {
        return Err(Error::Dataset(format!("no identities under {}", root.display())));
    }

    let splits_path = root.join("splits.json");
    if splits_path.exists() {
        let text = fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
        let map: HashMap<String, Vec<String>> = serde_json::from_str(&text)?;
        let mut lookup = HashMap::new();
        for (split, ids) in &map {
            let s: Split = split.parse()?;
            for id in ids {
                lookup.insert(id.as_str(), s);
            }
        }
        for i in &mut identities {
            i.split = *lookup
                .get(i.id.as_str())
                .ok_or_else(|| Error::Dataset(format!("identity {} missing from splits.json", i.id)))?;
        }
    } else {
        let splits = assign_splits(identities.len(), SPLIT_SEED);
        for (i, s) in identities.iter_mut().zip(splits) {
            i.split = s;
        }
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        identities,
    })
}

fn pick_split(index: &DatasetIndex, split: Split, min: usize) -> Result<Vec<usize>> {
    let ids = index.identities_in(split);
    if ids.len() < min {
        return Err(Error::Dataset(format!(
            "split {} has {} identities; {min} required",
            split.as_str(),
            ids.len()
        )));
    }
    Ok(ids)
}

fn pair_in(index: &DatasetIndex, identity: usize, rng: &mut impl Rng) -> PairRef {
    let videos = &index.identities[identity].videos;
    let video = rng.random_range(0..videos.len());
    let n = videos[video].frames.len();
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    PairRef {
        source: FrameRef { identity, video, frame: a },
        driving: FrameRef { identity, video, frame: b },
    }
}

/// Uniform identity, then video, then an ordered pair of distinct frames.
pub fn sample_pair(index: &DatasetIndex, split: Split, rng: &mut impl Rng) -> Result<PairRef> {
    let ids = pick_split(index, split, 1)?;
    let identity = ids[rng.random_range(0..ids.len())];
    Ok(pair_in(index, identity, rng))
}

pub fn sample_triplet(index: &DatasetIndex, split: Split, rng: &mut impl Rng) -> Result<TripletRef> {
    let ids = pick_split(index, split, 2)?;
    let a = rng.random_range(0..ids.len());
    let pair = pair_in(index, ids[a], rng);
    let mut r = rng.random_range(0..ids.len() - 1);
    if r >= a {
        r += 1;
    }
    let identity = ids[r];
    let videos = &index.identities[identity].videos;
    let video = rng.random_range(0..videos.len());
    let frame = rng.random_range(0..videos[video].frames.len());
    Ok(TripletRef {
        s_a: pair.source,
        d_a: pair.driving,
        d_r: FrameRef { identity, video, frame },
    })
}

/// Decoded frames held in memory.
#[derive(Clone, Debug, Default)]
pub struct FrameCache {
    frames: HashMap<FrameRef, Tensor<f32>>,
}

impl FrameCache {
    /// Loads every frame of the given splits.
    pub fn load(index: &DatasetIndex, splits: &[Split]) -> Result<Self> {
        let mut frames = HashMap::new();
        for &s in splits {
            for r in index.frames_in(s) {
                frames.insert(r, index.load_frame(&r)?);
            }
        }
        Ok(Self { frames })
    }

    pub fn get(&self, r: &FrameRef) -> Result<&Tensor<f32>> {
        self.frames
            .get(r)
            .ok_or_else(|| Error::Dataset(format!("frame {r:?} not loaded")))
    }

    /// Stacks the frames into one `(N, 3, H, W)` batch.
    pub fn batch(&self, refs: &[FrameRef]) -> Result<Tensor<f32>> {
        let items = refs.iter().map(|r| self.get(r).cloned()).collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
