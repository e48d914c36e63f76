use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gencycle::dataset::SceneData;
use gencycle::pipeline::{save_cloud, DENOISER_FILE};
use gencycle_render::GaussianCloud;

const TINY: &[&str] = &["--image_size", "16", "--denoiser_width", "8", "--recon_width", "8", "--diffusion_steps", "50"];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gencycle")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_v(args: &[String]) -> Output {
    run(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.txt" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen_data(dir: &Path, n: usize) {
    ok(&["gen-data", "--out_dir", s(dir), "--n_scenes", &n.to_string(), "--image_size", "16", "--seed", "3"]);
}

/// A tiny trained checkpoint under `dir/run/checkpoint`.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    gen_data(&data, 2);
    let run_dir = dir.join("run");
    let args = with(&["train", "--dataset_dir", s(&data), "--out_dir", s(&run_dir), "--train_steps", "2", "--pretrain_steps", "1"], TINY);
    let out = run_v(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    run_dir.join("checkpoint")
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_data(a.path(), 2);
    gen_data(b.path(), 2);
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
    assert!(a.path().join("manifest.txt").exists());
    assert!(a.path().join("scene_00001").join("meta.txt").exists());
}

#[test]
fn gen_data_with_zero_scenes_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out_dir", s(dir.path()), "--n_scenes", "0"]);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let out = run(&["gen-data", "--n_scenes", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out_dir"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "n_scenes 3\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad)]).status.code(), Some(2));
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad)]).status.code(), Some(2));
    fs::write(&bad, "out_dir = x\nn_scenes = many\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("out_dir = {}\nn_scenes = 5\nimage_size = 16\n", s(&dir.path().join("d")))).unwrap();
    ok(&["gen-data", "--config", s(&cfg), "--n-scenes", "1"]);
    assert!(dir.path().join("d/scene_00000").exists());
    assert!(!dir.path().join("d/scene_00001").exists());
}

#[test]
fn frozen_training_keeps_the_denoiser_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let denoiser_before = fs::read(ckpt.join(DENOISER_FILE)).unwrap();
    let data = dir.path().join("data");
    let frozen = dir.path().join("frozen");
    let args = ["train", "--dataset_dir", s(&data), "--out_dir", s(&frozen), "--checkpoint", s(&ckpt), "--frozen_2d", "true"];
    ok(&[&args[..], &["--train_steps", "2"]].concat());
    assert_eq!(fs::read(frozen.join("checkpoint").join(DENOISER_FILE)).unwrap(), denoiser_before);
    let log = fs::read_to_string(frozen.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("step,phase,L_total"));

    ok(&[&args[..], &["--train_steps", "3", "--resume", "true"]].concat());
    let log = fs::read_to_string(frozen.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let out = run(&["train", "--dataset_dir", s(&data), "--out_dir", s(&frozen), "--frozen_2d", "true", "--pretrain_steps", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sampling_modes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let out = run(&["sample", "--checkpoint", s(&ckpt), "--out_dir", s(&dir.path().join("x")), "--mode", "image_to_3d"]);
    assert_eq!(out.status.code(), Some(2));

    let text = |name: &str| {
        let out_dir = dir.path().join(name);
        ok(&[
            "sample", "--checkpoint", s(&ckpt), "--out_dir", s(&out_dir), "--mode", "text_to_3d", "--prompt", "red,ring",
            "--image_size", "16", "--steps", "3", "--seed", "4", "--cfg_scale", "2",
        ]);
        out_dir
    };
    let (a, b) = (text("a"), text("b"));
    assert_eq!(fs::read(a.join("cloud.ply")).unwrap(), fs::read(b.join("cloud.ply")).unwrap());
    assert!(a.join("view_03.png").exists());

    let scene = dir.path().join("data/scene_00000");
    let img = dir.path().join("img");
    ok(&[
        "sample", "--checkpoint", s(&ckpt), "--out_dir", s(&img), "--scene_dir", s(&scene), "--steps", "3",
        "--inversion_refine", "1", "--dump_steps", "true",
    ]);
    for f in ["cloud.ftc", "single_pass.ply", "prior_00.png", "manifest.txt"] {
        assert!(img.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_dir(img.join("steps")).unwrap().count(), 3 * 2 * 4);

    let out = run(&["sample", "--checkpoint", s(&ckpt), "--out_dir", s(&img), "--mode", "text_to_3d", "--prompt", "purple"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["sample", "--checkpoint", s(&ckpt), "--out_dir", s(&img), "--mode", "text_to_3d", "--recon_width", "16"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_scores_ground_truth_and_empty_clouds() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), 1);
    let scene_dir = dir.path().join("scene_00000");
    let scene = SceneData::load(&scene_dir).unwrap();
    let gt = dir.path().join("gt.ftc");
    save_cloud(&gt, &scene.cloud).unwrap();
    let out = dir.path().join("eval_gt");
    ok(&["eval", "--cloud", s(&gt), "--scene_dir", s(&scene_dir), "--out_dir", s(&out)]);
    let report = fs::read_to_string(out.join("eval.txt")).unwrap();
    let mean_psnr: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("psnr="))
        .unwrap_or_else(|| panic!("no psnr in {report}"))
        .trim()
        .parse()
        .unwrap();
    assert_eq!(mean_psnr, gencycle::metrics::PSNR_CAP);

    let empty = dir.path().join("empty.ftc");
    save_cloud(&empty, &GaussianCloud::default()).unwrap();
    let out = dir.path().join("eval_empty");
    ok(&["eval", "--cloud", s(&empty), "--scene_dir", s(&scene_dir), "--out_dir", s(&out)]);
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(!csv.contains("NaN") && !csv.contains("inf"), "{csv}");
}

#[test]
fn turntable_writes_frames() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), 1);
    let scene = SceneData::load(&dir.path().join("scene_00000")).unwrap();
    let cloud = dir.path().join("c.ftc");
    save_cloud(&cloud, &scene.cloud).unwrap();
    let out = dir.path().join("frames");
    ok(&["turntable", "--cloud", s(&cloud), "--out_dir", s(&out), "--n_frames", "4", "--image_size", "16"]);
    let frames: Vec<_> = (0..4).map(|i| fs::read(out.join(format!("frame_{i:04}.png"))).unwrap()).collect();
    assert_ne!(frames[0], frames[1]);
    assert_eq!(run(&["turntable", "--cloud", s(&cloud), "--out_dir", s(&out), "--n_frames", "0"]).status.code(), Some(2));
}
