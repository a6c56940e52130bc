use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn x2face(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_x2face")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = x2face(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_pngs(dir: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += count_pngs(&p);
        } else if p.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}

/// Tiny data plus a one-step checkpoint at 16x16.
fn tiny_setup(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(&["synth-data", "--identities", "6", "--videos", "1", "--frames", "5", "--resolution", "16", "--out", s(&data)]);
    let run = root.join("run");
    ok(&[
        "train", "--stage", "1", "--data", s(&data), "--out", s(&run), "--steps", "1", "--batch-size", "2",
        "--base-channels", "4", "--max-channels", "8", "--vector-dim", "8",
    ]);
    (data, run.join("checkpoint.x2f"))
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(x2face(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(x2face(&["synth-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(x2face(&["train", "--stage", "3", "--data", "d", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn help_lists_flags_with_defaults() {
    let out = ok(&["synth-data", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--identities", "--videos", "--frames", "--resolution", "--seed", "--out"] {
        assert!(text.contains(flag), "{flag} missing from:\n{text}");
    }
    assert!(text.contains("[default: 64]"));
    let subcommands = [
        "synth-data", "train", "train-comparator", "reconstruct", "drive", "fit-pose-maps", "drive-pose",
        "fit-audio-map", "drive-audio", "embed", "edit", "eval-recon", "eval-pose", "serve",
    ];
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for c in subcommands {
        assert!(top.contains(c), "{c} missing");
        ok(&[c, "--help"]);
    }
}

#[test]
fn synth_data_writes_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let res = ok(&[
        "synth-data", "--identities", "8", "--videos", "2", "--frames", "20", "--resolution", "64", "--seed", "7",
        "--out", s(&out),
    ]);
    assert_eq!(count_pngs(&out), 320);
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["frames"], 320);
    // A second run into the same directory refuses to clobber it.
    let again = x2face(&["synth-data", "--identities", "8", "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn inference_commands_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = tiny_setup(dir.path());
    let frame = |id: usize, f: usize| data.join(format!("id{id:04}/vid00/frame_{f:05}.png"));
    let frame = |id, f| {
        let p: PathBuf = frame(id, f);
        assert!(p.exists(), "{}", p.display());
        p
    };

    let gen = dir.path().join("gen.png");
    ok(&["reconstruct", "--checkpoint", s(&ck), "--sources", s(&frame(0, 0)), "--sources", s(&frame(0, 1)), "--driving", s(&frame(0, 2)), "--out", s(&gen)]);
    assert!(gen.exists());

    let emb = dir.path().join("emb.png");
    ok(&["embed", "--checkpoint", s(&ck), "--sources", s(&frame(0, 0)), "--out", s(&emb)]);

    let drv_dir = data.join("id0001/vid00");
    let driven = dir.path().join("driven");
    ok(&["drive", "--checkpoint", s(&ck), "--sources", s(&frame(0, 0)), "--driving-video-dir", s(&drv_dir), "--out-dir", s(&driven)]);
    assert_eq!(count_pngs(&driven), 5);

    let overlay = dir.path().join("overlay.png");
    x2face::imageio::write_png(&overlay, &x2face::Tensor::full([1, 4, 16, 16], 0.0)).unwrap();
    let edited = dir.path().join("edited");
    ok(&["edit", "--checkpoint", s(&ck), "--embedded", s(&emb), "--overlay", s(&overlay), "--driving-video-dir", s(&drv_dir), "--out-dir", s(&edited)]);
    assert_eq!(count_pngs(&edited), 5);

    let maps = dir.path().join("maps");
    ok(&["fit-pose-maps", "--checkpoint", s(&ck), "--data", s(&data), "--out-maps", s(&maps), "--steps", "20"]);
    ok(&["fit-audio-map", "--checkpoint", s(&ck), "--data", s(&data), "--out-maps", s(&maps)]);
    let pose_out = dir.path().join("pose.png");
    ok(&["drive-pose", "--checkpoint", s(&ck), "--maps", s(&maps), "--sources", s(&frame(0, 0)), "--pose", "0.1,-0.1,5", "--pose", "-0.1,0.1,-5", "--out", s(&pose_out)]);
    assert!(dir.path().join("pose_0.png").exists() && dir.path().join("pose_1.png").exists());
    let report = ok(&["eval-pose", "--checkpoint", s(&ck), "--maps", s(&maps), "--data", s(&data)]);
    assert!(String::from_utf8(report.stdout).unwrap().contains("MAE"));

    let audio = dir.path().join("a.json");
    let a_src = dir.path().join("a0.json");
    std::fs::write(&audio, serde_json::to_string(&vec![vec![0.1f64; 256], vec![0.3; 256]]).unwrap()).unwrap();
    std::fs::write(&a_src, serde_json::to_string(&vec![0.2f64; 256]).unwrap()).unwrap();
    let audio_out = dir.path().join("audio_out");
    ok(&["drive-audio", "--checkpoint", s(&ck), "--maps", s(&maps), "--sources", s(&frame(0, 0)), "--audio", s(&audio), "--audio-source", s(&a_src), "--out-dir", s(&audio_out)]);
    assert_eq!(count_pngs(&audio_out), 2);

    let empty = dir.path().join("empty_maps");
    std::fs::create_dir(&empty).unwrap();
    let missing = x2face(&["drive-pose", "--checkpoint", s(&ck), "--maps", s(&empty), "--sources", s(&frame(0, 0)), "--pose", "0,0,0", "--out", s(&pose_out)]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_line(&missing)["code"], "unfitted_map");
}

#[test]
fn resolution_mismatch_names_both_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = tiny_setup(dir.path());
    let big = dir.path().join("big.png");
    x2face::imageio::write_png(&big, &x2face::Tensor::full([1, 3, 32, 32], 0.5)).unwrap();
    let out = x2face(&["reconstruct", "--checkpoint", s(&ck), "--sources", s(&big), "--driving", s(&big), "--out", s(&dir.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["code"], "resolution_mismatch");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("16x16") && msg.contains("32x32"), "{msg}");
}

#[test]
fn eval_recon_reports_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = tiny_setup(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = ok(&["eval-recon", "--stage1", s(&ck), "--stage2", s(&ck), "--data", s(&data), "--n-pairs", "6", "--seed", "3", "--out", s(&out)]);
        assert!(String::from_utf8(res.stdout).unwrap().contains("M(3)"));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn domain_errors_exit_1_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = x2face(&["embed", "--checkpoint", s(&dir.path().join("missing.x2f")), "--sources", "x.png", "--out", "y.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["code"], "io");
    let data = dir.path().join("data");
    ok(&["synth-data", "--identities", "4", "--videos", "1", "--frames", "3", "--resolution", "16", "--out", s(&data)]);
    let out = x2face(&["train", "--stage", "2", "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["code"], "invalid_config");
}
