//! `x2face`: every workflow as one subcommand per process.
//!
//! Usage errors exit 2 with clap's usage text. Domain errors exit 1 and
//! print one JSON line `{"code": ..., "message": ...}` to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use x2face::control::{
    drive_with_audio, drive_with_pose, fit_audio_map, fit_pose_maps, ControlMaps, MapFitConfig, PoseCode,
};
use x2face::dataset::synth::{generate_synthetic_dataset, SynthConfig, DEFAULT_NOISE_STD};
use x2face::dataset::{index_dataset, DatasetIndex, Split};
use x2face::editing::{apply_overlay, render_edited_sequence, OverlayRgba};
use x2face::evaluation::{eval_pose_probe, eval_reconstruction, labeled_frames, ModelPair, ReconEvalConfig};
use x2face::imageio::{read_png, read_png_rgba, write_png};
use x2face::losses::{train_identity_comparator, ComparatorTrainConfig, IdentityComparator};
use x2face::networks::{
    embed_multi, load_checkpoint, x2face_forward, Checkpoint, DrivingNetwork, EmbeddedFace, EmbeddingNetwork,
    FaceFrame, NetConfig,
};
use x2face::training::{train, TrainConfig};
use x2face::{Error, Result};

#[derive(Parser)]
#[command(name = "x2face", version, about = "Face reenactment: train, drive, edit and evaluate warp networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural face-track dataset with ground-truth labels.
    SynthData(SynthDataArgs),
    /// Train the embedding and driving networks (stage 1 or 2).
    Train(TrainArgs),
    /// Train the identity comparator used by the stage-2 losses.
    TrainComparator(TrainComparatorArgs),
    /// Generate one frame from source frames and a driving frame.
    Reconstruct(ReconstructArgs),
    /// Drive the sources with every frame of a directory.
    Drive(DriveArgs),
    /// Fit the driving-vector/pose maps on the train split.
    FitPoseMaps(FitMapsArgs),
    /// Generate the sources at given poses.
    DrivePose(DrivePoseArgs),
    /// Fit the audio-to-driving-vector map and add it to a maps directory.
    FitAudioMap(FitMapsArgs),
    /// Drive the sources with audio features.
    DriveAudio(DriveAudioArgs),
    /// Write the embedded face of the sources.
    Embed(EmbedArgs),
    /// Paint an overlay on an embedded face and drive the result.
    Edit(EditArgs),
    /// Reconstruction error over training stage and source count.
    EvalRecon(EvalReconArgs),
    /// Pose-probe error of the driving vector.
    EvalPose(EvalPoseArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 2)]
    videos: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-pixel Gaussian noise std added to each rendered frame.
    #[arg(long, default_value_t = DEFAULT_NOISE_STD)]
    noise: f32,
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long, default_value_t = false)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// JSON file with TrainConfig fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Starting weights; required for stage 2.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Identity comparator; required for stage 2.
    #[arg(long)]
    comparator: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Disable gradient clipping.
    #[arg(long, default_value_t = false)]
    no_clip: bool,
    /// Channel width of the first encoder stage (fresh networks only).
    #[arg(long, default_value_t = NetConfig::desk().base_channels)]
    base_channels: usize,
    #[arg(long, default_value_t = NetConfig::desk().max_channels)]
    max_channels: usize,
    #[arg(long, default_value_t = NetConfig::desk().driving_vector_dim)]
    vector_dim: usize,
}

#[derive(Args)]
struct TrainComparatorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ComparatorTrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = ComparatorTrainConfig::default().base_channels)]
    base_channels: usize,
    #[arg(long, default_value_t = ComparatorTrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = ComparatorTrainConfig::default().lr)]
    lr: f64,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source frame; repeat for multi-source inference.
    #[arg(long, required = true)]
    sources: Vec<PathBuf>,
    #[arg(long)]
    driving: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DriveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true)]
    sources: Vec<PathBuf>,
    /// Directory of driving PNG frames, used in file-name order.
    #[arg(long)]
    driving_video_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FitMapsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Maps directory; existing maps of other kinds are kept.
    #[arg(long)]
    out_maps: PathBuf,
    #[arg(long, default_value_t = MapFitConfig::default().steps)]
    steps: usize,
}

#[derive(Args)]
struct DrivePoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    maps: PathBuf,
    #[arg(long, required = true)]
    sources: Vec<PathBuf>,
    /// Comma-separated pose code (tx,ty,rot for synthetic data); repeat
    /// for a sweep.
    #[arg(long, required = true, allow_hyphen_values = true)]
    pose: Vec<String>,
    /// Output PNG; with several poses, `<stem>_<i>.png` per pose.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DriveAudioArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    maps: PathBuf,
    #[arg(long, required = true)]
    sources: Vec<PathBuf>,
    /// JSON array of driving audio feature vectors.
    #[arg(long)]
    audio: PathBuf,
    /// JSON audio feature vector of the source frame.
    #[arg(long)]
    audio_source: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true)]
    sources: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embedded-face PNG, as written by `embed`.
    #[arg(long)]
    embedded: PathBuf,
    /// RGBA overlay PNG at embedded-face resolution.
    #[arg(long)]
    overlay: PathBuf,
    #[arg(long)]
    driving_video_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalReconArgs {
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    stage2: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source counts to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    n_source: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON report path; the text table goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Embedded-face lifetime in seconds; 0 keeps entries forever.
    #[arg(long, default_value_t = x2face_service::DEFAULT_TTL.as_secs())]
    ttl_secs: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"code": e.code(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::TrainComparator(a) => train_comparator(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Drive(a) => drive(a),
        Command::FitPoseMaps(a) => fit_pose(a),
        Command::DrivePose(a) => drive_pose(a),
        Command::FitAudioMap(a) => fit_audio(a),
        Command::DriveAudio(a) => drive_audio(a),
        Command::Embed(a) => embed(a),
        Command::Edit(a) => edit(a),
        Command::EvalRecon(a) => eval_recon(a),
        Command::EvalPose(a) => eval_pose(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split `{s}` (train, val or test)"))),
    }
}

/// Reads frames that must already be at the model resolution.
fn load_frames(paths: &[PathBuf], resolution: usize) -> Result<Vec<FaceFrame>> {
    paths
        .iter()
        .map(|p| {
            let t = read_png(p)?;
            let [_, _, h, w] = t.shape();
            if (h, w) != (resolution, resolution) {
                return Err(Error::ResolutionMismatch {
                    expected: resolution,
                    got_w: w,
                    got_h: h,
                });
            }
            FaceFrame::new(t)
        })
        .collect()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no PNG frames in {}", dir.display())));
    }
    Ok(files)
}

fn write_frames(dir: &Path, frames: &[FaceFrame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(format!("frame_{i:04}.png")), f.tensor())?;
    }
    Ok(())
}

fn synth_data(a: SynthDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        noise_std: a.noise,
        ..SynthConfig::new(a.identities, a.videos, a.frames, a.resolution, a.seed)
    };
    let index = generate_synthetic_dataset(&cfg, &a.out, a.overwrite)?;
    let (ids, videos, frames) = index.counts();
    print_json(&json!({"identities": ids, "videos": videos, "frames": frames}))
}

fn data_resolution(index: &DatasetIndex) -> Result<usize> {
    let first = index
        .frames_in(Split::Train)
        .into_iter()
        .next()
        .ok_or_else(|| Error::Dataset("train split is empty".into()))?;
    let [_, _, h, w] = index.load_frame(&first)?.shape();
    if h != w {
        return Err(Error::Dataset(format!("frames must be square, got {w}x{h}")));
    }
    Ok(h)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    // The flag picks the stage and its defaults; explicit file values win.
    let mut file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => json!({}),
    };
    if let Some(o) = file.as_object_mut() {
        o.insert("stage".into(), json!(a.stage));
    }
    let mut cfg = TrainConfig::from_json_value(file)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.max_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
    }
    if a.no_clip {
        cfg.clip_norm = None;
    }
    cfg.validate()?;

    let index = index_dataset(&a.data)?;
    let (mut emb, mut drv) = match &a.init_checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.embedding, ck.driving)
        }
        None if cfg.stage == 2 => return Err(Error::Config("stage 2 needs --init-checkpoint".into())),
        None => {
            let net = NetConfig {
                resolution: data_resolution(&index)?,
                base_channels: a.base_channels,
                max_channels: a.max_channels,
                driving_vector_dim: a.vector_dim,
            };
            (
                EmbeddingNetwork::new(net, cfg.seed)?,
                DrivingNetwork::new(net, cfg.seed.wrapping_add(1))?,
            )
        }
    };
    let comparator = a.comparator.as_deref().map(IdentityComparator::load).transpose()?;
    let out = train(&cfg, &index, &mut emb, &mut drv, comparator.as_ref(), &a.out)?;
    print_json(&json!({
        "steps": out.steps,
        "final_lr": out.final_lr,
        "initial_val_l1": out.initial_val_l1,
        "final_val_l1": out.final_val_l1,
        "checkpoint": out.checkpoint,
        "metrics": out.metrics,
    }))
}

fn train_comparator(a: TrainComparatorArgs) -> Result<()> {
    let index = index_dataset(&a.data)?;
    let cfg = ComparatorTrainConfig {
        base_channels: a.base_channels,
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        ..ComparatorTrainConfig::default()
    };
    let (cmp, report) = train_identity_comparator(&index, &cfg, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    cmp.save(&a.out)?;
    print_json(&serde_json::to_value(&report)?)
}

fn checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path)
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let res = ck.config.resolution;
    let sources = load_frames(&a.sources, res)?;
    let driving = load_frames(std::slice::from_ref(&a.driving), res)?.remove(0);
    let gen = x2face_forward(&ck.embedding, &ck.driving, &sources, &driving)?;
    write_png(&a.out, gen.tensor())
}

fn drive(a: DriveArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let res = ck.config.resolution;
    let sources = load_frames(&a.sources, res)?;
    let embedded = embed_multi(&ck.embedding, &sources)?;
    let driving = load_frames(&png_files(&a.driving_video_dir)?, res)?;
    let frames = render_edited_sequence(&ck.driving, &embedded, &driving)?;
    write_frames(&a.out_dir, &frames)
}

fn reports_json(reports: &[(String, x2face::control::FitReport)]) -> Result<serde_json::Value> {
    let mut m = serde_json::Map::new();
    for (k, r) in reports {
        m.insert(k.clone(), serde_json::to_value(r)?);
    }
    Ok(serde_json::Value::Object(m))
}

fn existing_maps(dir: &Path) -> Result<ControlMaps> {
    if dir.exists() {
        ControlMaps::load_dir(dir)
    } else {
        Ok(ControlMaps::default())
    }
}

fn fit_pose(a: FitMapsArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let index = index_dataset(&a.data)?;
    let cfg = MapFitConfig {
        steps: a.steps,
        ..MapFitConfig::default()
    };
    let (vp, pv, reports) = fit_pose_maps(&ck.driving, &index, &cfg)?;
    let mut maps = existing_maps(&a.out_maps)?;
    maps.v_to_p = Some(vp);
    maps.p_to_v = Some(pv);
    maps.save_dir(&a.out_maps)?;
    print_json(&reports_json(&reports)?)
}

fn fit_audio(a: FitMapsArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let index = index_dataset(&a.data)?;
    let (av, report) = fit_audio_map(&ck.driving, &index)?;
    let mut maps = existing_maps(&a.out_maps)?;
    maps.a_to_v = Some(av);
    maps.save_dir(&a.out_maps)?;
    print_json(&reports_json(&[("a_to_v".to_string(), report)])?)
}

fn parse_pose(s: &str) -> Result<PoseCode> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("pose `{s}` must be comma-separated numbers")))
        })
        .collect()
}

fn numbered(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}_{i}.png"))
}

fn drive_pose(a: DrivePoseArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let maps = ControlMaps::load_dir(&a.maps)?;
    let sources = load_frames(&a.sources, ck.config.resolution)?;
    let poses = a.pose.iter().map(|p| parse_pose(p)).collect::<Result<Vec<_>>>()?;
    let frames = drive_with_pose(&ck.embedding, &ck.driving, &maps, &sources, &poses)?;
    if frames.len() == 1 {
        return write_png(&a.out, frames[0].tensor());
    }
    for (i, f) in frames.iter().enumerate() {
        write_png(&numbered(&a.out, i), f.tensor())?;
    }
    Ok(())
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn drive_audio(a: DriveAudioArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let maps = ControlMaps::load_dir(&a.maps)?;
    let sources = load_frames(&a.sources, ck.config.resolution)?;
    let driving: Vec<Vec<f64>> = read_json_file(&a.audio)?;
    let source: Vec<f64> = read_json_file(&a.audio_source)?;
    let frames = drive_with_audio(&ck.embedding, &ck.driving, &maps, &sources, &driving, &source)?;
    write_frames(&a.out_dir, &frames)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let sources = load_frames(&a.sources, ck.config.resolution)?;
    let embedded = embed_multi(&ck.embedding, &sources)?;
    write_png(&a.out, embedded.tensor())
}

fn edit(a: EditArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let res = ck.config.resolution;
    let embedded = EmbeddedFace::new(load_frames(std::slice::from_ref(&a.embedded), res)?.remove(0).into_tensor())?;
    let overlay = OverlayRgba::new(read_png_rgba(&a.overlay)?)?;
    let modified = apply_overlay(&embedded, &overlay)?;
    let driving = load_frames(&png_files(&a.driving_video_dir)?, res)?;
    let frames = render_edited_sequence(&ck.driving, &modified, &driving)?;
    write_frames(&a.out_dir, &frames)
}

fn eval_recon(a: EvalReconArgs) -> Result<()> {
    let s1 = checkpoint(&a.stage1)?;
    let s2 = checkpoint(&a.stage2)?;
    let index = index_dataset(&a.data)?;
    let cfg = ReconEvalConfig {
        n_pairs: a.n_pairs,
        seed: a.seed,
        n_sources: a.n_source,
        split: parse_split(&a.split)?,
    };
    let m1 = ModelPair {
        embedding: &s1.embedding,
        driving: &s1.driving,
    };
    let m2 = ModelPair {
        embedding: &s2.embedding,
        driving: &s2.driving,
    };
    let report = eval_reconstruction(&m1, &m2, &index, &cfg)?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()?).map_err(|e| Error::io(out, e))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn eval_pose(a: EvalPoseArgs) -> Result<()> {
    let ck = checkpoint(&a.checkpoint)?;
    let maps = ControlMaps::load_dir(&a.maps)?;
    let (vp, _) = maps.pose_maps()?;
    let index = index_dataset(&a.data)?;
    let labeled = labeled_frames(&index, parse_split(&a.split)?)?;
    let report = eval_pose_probe(vp, &labeled, &ck.driving)?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()?).map_err(|e| Error::io(out, e))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = x2face_service::Model::load(&a.checkpoint, a.maps.as_deref())?;
    let cfg = x2face_service::ServiceConfig {
        ttl: (a.ttl_secs > 0).then(|| std::time::Duration::from_secs(a.ttl_secs)),
        ..Default::default()
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(x2face_service::serve(model, cfg, &a.host, a.port))
        .map_err(|e| Error::io(format!("{}:{}", a.host, a.port), e))
}
