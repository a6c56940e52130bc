//! Procedural face tracks with known identity, pose and expression.
//!
//! A face is an ellipse with a hair cap, two eye disks and a mouth ellipse,
//! all laid out in face-local coordinates `(a, b)`: the ellipse is the unit
//! disk, `b` grows downwards, and the mapping to the image applies the pose
//! scale, rotation and translation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{index_dataset, DatasetIndex, VideoLabels, AUDIO_DIM};
use crate::error::{Error, Result};
use crate::imageio;
use crate::networks::FaceFrame;
use crate::tensor::Tensor;

pub const TX_RANGE: (f32, f32) = (-0.25, 0.25);
pub const TY_RANGE: (f32, f32) = (-0.25, 0.25);
pub const ROT_RANGE: (f32, f32) = (-30.0, 30.0);
pub const SCALE_RANGE: (f32, f32) = (0.8, 1.2);
pub const MOUTH_RANGE: (f32, f32) = (0.0, 1.0);

/// Face half-width at scale 1, as a fraction of the image width.
pub const FACE_RADIUS: f32 = 0.3;
const HAIR_LINE: f32 = -0.55;
const EYE_ROW: f32 = -0.15;
const EYE_RADIUS: f32 = 0.13;
const MOUTH_ROW: f32 = 0.45;
const MOUTH_HALF_WIDTH: f32 = 0.38;
/// Face-local position of the forehead, between hair line and eyes.
pub const FOREHEAD: (f32, f32) = (0.0, -0.36);

pub const EYE_RGB: [f32; 3] = [0.08, 0.08, 0.10];
pub const MOUTH_RGB: [f32; 3] = [0.25, 0.05, 0.08];
pub const DEFAULT_NOISE_STD: f32 = 0.0;
const AUDIO_NOISE_STD: f64 = 0.05;

/// Per-identity appearance, fixed for every frame of that identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthIdentity {
    pub bg_hue: f32,
    pub skin_hue: f32,
    /// Face height over width.
    pub aspect: f32,
    /// Eye offset from the face axis, in face-local units.
    pub eye_spacing: f32,
    pub hair_hue: f32,
}

impl SynthIdentity {
    pub fn from_seed(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index + 1);
        let skin_hue: f32 = rng.random_range(0.0..1.0);
        // Keep background and skin at least 0.3 apart on the hue circle.
        let bg_hue = (skin_hue + rng.random_range(0.3..0.7)) % 1.0;
        Self {
            bg_hue,
            skin_hue,
            aspect: rng.random_range(1.1..1.35),
            eye_spacing: rng.random_range(0.3..0.5),
            hair_hue: rng.random_range(0.0..1.0),
        }
    }

    pub fn background_rgb(&self) -> [f32; 3] {
        hsv(self.bg_hue, 0.45, 0.85)
    }

    pub fn skin_rgb(&self) -> [f32; 3] {
        hsv(self.skin_hue, 0.5, 0.88)
    }

    pub fn hair_rgb(&self) -> [f32; 3] {
        hsv(self.hair_hue, 0.6, 0.5)
    }
}

/// Per-frame pose and expression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPose {
    /// Horizontal offset as a fraction of the width.
    pub tx: f32,
    pub ty: f32,
    /// Degrees.
    pub rot: f32,
    pub scale: f32,
    /// Mouth opening in `[0, 1]`.
    pub mouth: f32,
}

impl SynthPose {
    pub fn neutral() -> Self {
        Self {
            tx: 0.0,
            ty: 0.0,
            rot: 0.0,
            scale: 1.0,
            mouth: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("tx", self.tx, TX_RANGE),
            ("ty", self.ty, TY_RANGE),
            ("rot", self.rot, ROT_RANGE),
            ("scale", self.scale, SCALE_RANGE),
            ("mouth", self.mouth, MOUTH_RANGE),
        ];
        for (name, v, (lo, hi)) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Precondition(format!("pose {name}={v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// The 3-dim pose code `(tx, ty, rot)`.
    pub fn code(&self) -> [f32; 3] {
        [self.tx, self.ty, self.rot]
    }

    fn from_array(a: [f32; 5]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            rot: a[2],
            scale: a[3],
            mouth: a[4],
        }
    }
}

const RANGES: [(f32, f32); 5] = [TX_RANGE, TY_RANGE, ROT_RANGE, SCALE_RANGE, MOUTH_RANGE];

pub(crate) fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Geometry of one posed face in normalized image coordinates `[0, 1]²`.
#[derive(Clone, Copy, Debug)]
pub struct FaceGeometry {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    cos: f32,
    sin: f32,
}

impl FaceGeometry {
    pub fn new(identity: &SynthIdentity, pose: &SynthPose) -> Self {
        let rx = FACE_RADIUS * pose.scale;
        let theta = pose.rot.to_radians();
        Self {
            cx: 0.5 + pose.tx,
            cy: 0.5 + pose.ty,
            rx,
            ry: rx * identity.aspect,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Image point `(u, v)` to face-local `(a, b)`.
    pub fn to_local(&self, u: f32, v: f32) -> (f32, f32) {
        let (dx, dy) = (u - self.cx, v - self.cy);
        let a = self.cos * dx + self.sin * dy;
        let b = -self.sin * dx + self.cos * dy;
        (a / self.rx, b / self.ry)
    }

    /// Face-local `(a, b)` to image `(u, v)`.
    pub fn to_image(&self, a: f32, b: f32) -> (f32, f32) {
        let (la, lb) = (a * self.rx, b * self.ry);
        (self.cx + self.cos * la - self.sin * lb, self.cy + self.sin * la + self.cos * lb)
    }

    /// Face-local point as a pixel position `(x, y)` at `resolution`.
    pub fn pixel(&self, a: f32, b: f32, resolution: usize) -> (f32, f32) {
        let (u, v) = self.to_image(a, b);
        (u * resolution as f32 - 0.5, v * resolution as f32 - 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Background,
    Hair,
    Eye,
    Mouth,
    Skin,
}

fn region_at(identity: &SynthIdentity, pose: &SynthPose, a: f32, b: f32) -> Region {
    if a * a + b * b > 1.0 {
        return Region::Background;
    }
    if b < HAIR_LINE {
        return Region::Hair;
    }
    let s = identity.eye_spacing;
    let eye = |cx: f32| (a - cx).powi(2) + (b - EYE_ROW).powi(2) < EYE_RADIUS * EYE_RADIUS;
    if eye(s) || eye(-s) {
        return Region::Eye;
    }
    let mh = 0.05 + 0.25 * pose.mouth;
    if (a / MOUTH_HALF_WIDTH).powi(2) + ((b - MOUTH_ROW) / mh).powi(2) < 1.0 {
        return Region::Mouth;
    }
    Region::Skin
}

/// Region at the center of pixel `(x, y)`, without supersampling.
pub fn region_of_pixel(identity: &SynthIdentity, pose: &SynthPose, resolution: usize, x: usize, y: usize) -> Region {
    let geo = FaceGeometry::new(identity, pose);
    let r = resolution as f32;
    let (a, b) = geo.to_local((x as f32 + 0.5) / r, (y as f32 + 0.5) / r);
    region_at(identity, pose, a, b)
}

/// Brightness factor over the face-local unit disk: darker towards the rim,
/// brighter on the left cheek. Stays within `[0.6, 1.1]`.
fn face_shade(a: f32, b: f32) -> f32 {
    1.0 - 0.3 * (a * a + b * b) - 0.1 * a
}

/// Background colour at normalized image point `(u, v)`. The gradient is
/// linear, so the value at a pixel center equals its supersampled mean.
pub fn background_at(identity: &SynthIdentity, u: f32, v: f32) -> [f32; 3] {
    shaded(identity.background_rgb(), 0.6 + 0.2 * (u + v))
}

fn shaded(rgb: [f32; 3], k: f32) -> [f32; 3] {
    rgb.map(|c| (c * k).clamp(0.0, 1.0))
}

/// Deterministic noise-free rendering with 2x2 supersampling.
pub fn render_synth_frame(identity: &SynthIdentity, pose: &SynthPose, resolution: usize) -> Result<FaceFrame> {
    pose.validate()?;
    if resolution == 0 {
        return Err(Error::Precondition("resolution must be positive".into()));
    }
    let geo = FaceGeometry::new(identity, pose);
    // Skin and hair carry shading fixed to the face; the background carries
    // a gradient fixed to the image. Flat fills would leave the sampler
    // without gradients away from region boundaries.
    let colors = |region: Region, a: f32, b: f32, u: f32, v: f32| match region {
        Region::Background => background_at(identity, u, v),
        Region::Hair => shaded(identity.hair_rgb(), face_shade(a, b)),
        Region::Eye => EYE_RGB,
        Region::Mouth => MOUTH_RGB,
        Region::Skin => shaded(identity.skin_rgb(), face_shade(a, b)),
    };
    let r = resolution as f32;
    let mut img = Tensor::zeros([1, 3, resolution, resolution]);
    for y in 0..resolution {
        for x in 0..resolution {
            let mut acc = [0.0f32; 3];
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let (u, v) = ((x as f32 + sx) / r, (y as f32 + sy) / r);
                let (a, b) = geo.to_local(u, v);
                let c = colors(region_at(identity, pose, a, b), a, b, u, v);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
            for (k, v) in acc.iter().enumerate() {
                img.set([0, k, y, x], v / 4.0);
            }
        }
    }
    FaceFrame::new(img)
}

/// Rec. 601 luma.
pub fn luminance(img: &Tensor<f32>, x: usize, y: usize) -> f32 {
    0.299 * img.at([0, 0, y, x]) + 0.587 * img.at([0, 1, y, x]) + 0.114 * img.at([0, 2, y, x])
}

pub const DARK_LUMINANCE: f32 = 0.3;

/// Dark pixels inside the widest possible mouth region of a posed face.
pub fn mouth_dark_pixel_count(img: &Tensor<f32>, identity: &SynthIdentity, pose: &SynthPose) -> usize {
    let res = img.shape()[3];
    let geo = FaceGeometry::new(identity, pose);
    let r = res as f32;
    let mut n = 0;
    for y in 0..img.shape()[2] {
        for x in 0..res {
            let (a, b) = geo.to_local((x as f32 + 0.5) / r, (y as f32 + 0.5) / r);
            let in_box = (a / (MOUTH_HALF_WIDTH + 0.05)).powi(2) + ((b - MOUTH_ROW) / 0.35).powi(2) < 1.0;
            if in_box && luminance(img, x, y) < DARK_LUMINANCE {
                n += 1;
            }
        }
    }
    n
}

/// Centroid `(x, y)` in pixels of the pixels within `tol` (max channel
/// difference) of `rgb`; `None` when no pixel matches.
pub fn color_centroid(img: &Tensor<f32>, rgb: [f32; 3], tol: f32) -> Option<(f32, f32)> {
    let [_, _, h, w] = img.shape();
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            let close = (0..3).all(|k| (img.at([0, k, y, x]) - rgb[k]).abs() <= tol);
            if close {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| ((sx / n as f64) as f32, (sy / n as f64) as f32))
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub n_videos: usize,
    pub n_frames: usize,
    pub resolution: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
}

fn default_noise() -> f32 {
    DEFAULT_NOISE_STD
}

impl SynthConfig {
    pub fn new(n_identities: usize, n_videos: usize, n_frames: usize, resolution: usize, seed: u64) -> Self {
        Self {
            n_identities,
            n_videos,
            n_frames,
            resolution,
            seed,
            noise_std: DEFAULT_NOISE_STD,
        }
    }
}

/// Contents of `synth.json` at the dataset root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub identities: Vec<(String, SynthIdentity)>,
    /// `AUDIO_DIM` rows of weights on `(mouth, mouth², tx)`.
    pub audio_projection: Vec<[f32; 3]>,
}

impl SynthManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("synth.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn identity(&self, id: &str) -> Option<&SynthIdentity> {
        self.identities.iter().find(|(n, _)| n == id).map(|(_, i)| i)
    }
}

pub fn identity_dir_name(i: usize) -> String {
    format!("id{i:04}")
}

pub fn video_dir_name(v: usize) -> String {
    format!("vid{v:02}")
}

pub fn frame_file_name(f: usize) -> String {
    format!("frame_{f:05}.png")
}

/// Clipped Gaussian random walk over all five pose parameters.
pub fn pose_track(rng: &mut impl Rng, n_frames: usize) -> Vec<SynthPose> {
    let mut cur: [f32; 5] = std::array::from_fn(|k| rng.random_range(RANGES[k].0..=RANGES[k].1));
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        if f > 0 {
            for (k, v) in cur.iter_mut().enumerate() {
                let (lo, hi) = RANGES[k];
                let step = Normal::new(0.0, 0.1 * (hi - lo) as f64).expect("positive std");
                *v = (*v + step.sample(rng) as f32).clamp(lo, hi);
            }
        }
        out.push(SynthPose::from_array(cur));
    }
    out
}

/// Synthetic audio feature of one frame.
pub fn audio_feature(projection: &[[f32; 3]], pose: &SynthPose, rng: &mut impl Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, AUDIO_NOISE_STD).expect("positive std");
    let basis = [pose.mouth, pose.mouth * pose.mouth, pose.tx];
    projection
        .iter()
        .map(|row| {
            let clean: f32 = row.iter().zip(&basis).map(|(w, b)| w * b).sum();
            clean + noise.sample(rng) as f32
        })
        .collect()
}

/// Renders and writes a complete dataset under `out_dir`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path, overwrite: bool) -> Result<DatasetIndex> {
    if cfg.n_identities == 0 || cfg.n_videos == 0 || cfg.n_frames < 2 || cfg.resolution == 0 {
        return Err(Error::Config(
            "need at least one identity and video, two frames per video, and a positive resolution".into(),
        ));
    }
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Dataset(format!(
                    "output directory {} is not empty",
                    out_dir.display()
                )));
            }
            fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut proj_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let projection: Vec<[f32; 3]> = (0..AUDIO_DIM)
        .map(|_| std::array::from_fn(|_| std_normal.sample(&mut proj_rng) as f32))
        .collect();
    let pixel_noise = Normal::new(0.0f64, cfg.noise_std.max(0.0) as f64).expect("finite std");

    let mut identities = Vec::with_capacity(cfg.n_identities);
    for i in 0..cfg.n_identities {
        let identity = SynthIdentity::from_seed(cfg.seed, i as u64);
        let id_name = identity_dir_name(i);
        for v in 0..cfg.n_videos {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 << 32 | (i as u64) << 12 | v as u64);
            let dir = out_dir.join(&id_name).join(video_dir_name(v));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let poses = pose_track(&mut rng, cfg.n_frames);
            let mut labels = VideoLabels::default();
            for (f, pose) in poses.iter().enumerate() {
                let mut img = render_synth_frame(&identity, pose, cfg.resolution)?.into_tensor();
                if cfg.noise_std > 0.0 {
                    for p in img.data_mut() {
                        *p = (*p + pixel_noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
                    }
                }
                imageio::write_png(&dir.join(frame_file_name(f)), &img)?;
                labels.pose.push(pose.code());
                labels.nuisance.push([pose.scale, pose.mouth]);
                labels.audio_features.push(audio_feature(&projection, pose, &mut rng));
            }
            labels.write(&dir.join("labels.json"))?;
        }
        identities.push((id_name, identity));
    }
    let manifest = SynthManifest {
        config: cfg.clone(),
        identities,
        audio_projection: projection,
    };
    let path = out_dir.join("synth.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    let index = index_dataset(out_dir)?;
    index.write_splits()?;
    Ok(index)
}
