use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::{Device, Tensor};
use gencycle::config::Config;
use gencycle::dataset::{self, PerturbConfig, SceneData, BACKGROUND, FOV_DEG, ORBIT_RADIUS};
use gencycle::imageio::{read_png, write_png};
use gencycle::loss::Perceptual;
use gencycle::pipeline::{
    evaluate_cloud, images_to_tensor, load_cloud, load_denoiser, save_cloud, sample, single_pass, tensor_to_images,
    to_image_space, ModelConfig, Models, Mode, PriorProvider, SampleRequest, StepStats, TrainConfig, TrainSample,
    Trainer, OPTIM_FILE,
};
use gencycle::rng;
use gencycle::splat_op::tensor_to_cloud;
use gencycle_render::{render, write_ply, CameraPose, GaussianCloud, RenderSettings};

use crate::manifest::RunManifest;
use crate::UsageError;

pub fn run(name: &str, cfg: &Config) -> Result<()> {
    match name {
        "gen-data" => gen_data(cfg),
        "train" => train(cfg),
        "sample" => sample_cmd(cfg),
        "eval" => eval(cfg),
        "turntable" => turntable(cfg),
        other => Err(UsageError(format!("unknown subcommand `{other}`")).into()),
    }
}

fn path_key(cfg: &Config, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(cfg.require::<String>(key)?))
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:05}")
}

fn gen_data(cfg: &Config) -> Result<()> {
    let out = path_key(cfg, "out_dir")?;
    let n: usize = cfg.require("n_scenes")?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let size: usize = cfg.get_or("image_size", 64)?;
    let offset: usize = cfg.get_or("scene_offset", 0)?;
    let png = cfg.get_bool("png", false)?;
    if size == 0 {
        return Err(usage("image_size must be positive"));
    }
    let mut manifest = RunManifest::start("gen-data", cfg, seed);
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    for i in offset..offset + n {
        let scene_seed = rng::child_seed(seed, &format!("scene.{i}"));
        let scene = SceneData::generate(scene_seed, size);
        scene.save(&out.join(scene_dir_name(i)), png)?;
        log::info!("scene {i}: {} ({} Gaussians)", scene.spec.caption(), scene.cloud.len());
    }
    manifest.path("output", &out);
    manifest.record("n_scenes", n);
    manifest.record("scene_seed_rule", "child_seed(seed, \"scene.<index>\")");
    manifest.write(&out)?;
    Ok(())
}

/// Scene directories under `dir` in name order. Unreadable scenes are skipped.
fn load_dataset(dir: &Path, device: &Device) -> Result<(Vec<TrainSample>, usize)> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read dataset {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let (mut samples, mut skipped) = (Vec::new(), 0);
    for p in entries {
        match SceneData::load(&p).and_then(|s| TrainSample::from_scene(&s, device)) {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped += 1;
            }
        }
    }
    Ok((samples, skipped))
}

/// Fails when a key present in the config disagrees with the checkpoint.
fn check_architecture(models: &Models, cfg: &Config) -> Result<()> {
    let mc = ModelConfig::from_config(cfg)?;
    let mut expected = ModelConfig {
        denoiser_width: models.denoiser.config().width,
        recon_width: models.recon.config().width,
        diffusion_steps: models.schedule.num_steps(),
        ..mc.clone()
    };
    if cfg.contains("denoiser_width") {
        expected.denoiser_width = mc.denoiser_width;
    }
    if cfg.contains("recon_width") {
        expected.recon_width = mc.recon_width;
    }
    if cfg.contains("diffusion_steps") {
        expected.diffusion_steps = mc.diffusion_steps;
    }
    models.check_matches(&expected)?;
    Ok(())
}

fn read_log_prefix(path: &Path, before_step: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else { return Vec::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < before_step))
        .map(str::to_string)
        .collect()
}

fn train(cfg: &Config) -> Result<()> {
    let device = Device::Cpu;
    let data_dir = path_key(cfg, "dataset_dir")?;
    let out = path_key(cfg, "out_dir")?;
    let tc = TrainConfig::from_config(cfg)?;
    let mc = ModelConfig::from_config(cfg)?;
    let pretrain: u64 = cfg.get_or("pretrain_steps", 0)?;
    let save_every: u64 = cfg.get_or("save_every", 100)?;
    let log_every: u64 = cfg.get_or("log_every", 10)?;
    if tc.frozen_2d && pretrain > 0 {
        return Err(gencycle::Error::config("pretrain_steps", "must be 0 when frozen_2d is set").into());
    }
    let mut manifest = RunManifest::start("train", cfg, tc.seed);
    let (samples, skipped) = load_dataset(&data_dir, &device)?;
    if samples.is_empty() {
        return Err(anyhow::anyhow!("no usable scenes in {}", data_dir.display()));
    }
    let joint: u64 = match cfg.get::<u64>("train_steps")? {
        Some(n) => n,
        None => (tc.epochs * samples.len().div_ceil(tc.batch_size)) as u64,
    };
    let ckpt = out.join("checkpoint");
    let mut trainer = if cfg.get_bool("resume", false)? && ckpt.join(OPTIM_FILE).exists() {
        let t = Trainer::resume(&ckpt, tc.clone(), &device)?;
        check_architecture(&t.models, cfg)?;
        log::info!("resumed at step {}", t.steps_done());
        t
    } else {
        let models = match cfg.get::<String>("checkpoint")? {
            Some(init) => {
                let m = Models::load(Path::new(&init), &device)?;
                check_architecture(&m, cfg)?;
                m
            }
            None => Models::new(&mc, tc.seed, &device)?,
        };
        Trainer::new(models, tc.clone())?
    };
    fs::create_dir_all(&out)?;
    let log_path = out.join("loss.csv");
    let mut rows = read_log_prefix(&log_path, trainer.steps_done());
    let total = pretrain + joint;
    let write_log = |rows: &[String]| -> std::io::Result<()> {
        let mut s = String::from(StepStats::CSV_HEADER);
        s.push('\n');
        for r in rows {
            s += r;
            s.push('\n');
        }
        fs::write(&log_path, s)
    };
    while trainer.steps_done() < total {
        let stats = if trainer.steps_done() < pretrain {
            trainer.pretrain_step(&samples)?
        } else {
            trainer.train_step(&samples)?
        };
        rows.push(stats.csv_row());
        let done = trainer.steps_done();
        if log_every > 0 && done % log_every == 0 {
            log::info!("step {done}/{total}: L_total {:.5} grad_norm {:.3}", stats.total, stats.grad_norm);
        }
        if save_every > 0 && done % save_every == 0 {
            trainer.save(&ckpt)?;
            write_log(&rows)?;
        }
    }
    trainer.save(&ckpt)?;
    write_log(&rows)?;
    manifest.path("dataset", &data_dir);
    manifest.path("checkpoint", &ckpt);
    manifest.record("scenes_used", samples.len());
    manifest.record("scenes_skipped", skipped);
    manifest.record("steps", trainer.steps_done());
    manifest.write(&out)?;
    Ok(())
}

/// Comma-separated attribute names; an empty string is the null prompt.
fn parse_prompt(text: &str) -> Result<Vec<u32>> {
    let mut tokens = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(dataset::token_by_name)
        .collect::<gencycle::Result<Vec<_>>>()?;
    tokens.sort_unstable();
    tokens.dedup();
    Ok(tokens)
}

/// `view:names;view:names`, e.g. `2:blue,ring;3:red`.
fn parse_view_prompts(text: &str, base: &[u32], views: usize) -> Result<Vec<Vec<u32>>> {
    let mut out = vec![base.to_vec(); views];
    for part in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (view, prompt) = part
            .split_once(':')
            .ok_or_else(|| gencycle::Error::config("view_prompts", format!("expected `view:tokens`, got `{part}`")))?;
        let view: usize = view
            .trim()
            .parse()
            .map_err(|_| gencycle::Error::config("view_prompts", format!("bad view index `{view}`")))?;
        if view >= views {
            return Err(gencycle::Error::config("view_prompts", format!("view {view} out of {views}")).into());
        }
        out[view] = parse_prompt(prompt)?;
    }
    Ok(out)
}

fn default_cameras(n: usize, size: usize) -> Vec<CameraPose> {
    (0..n)
        .map(|i| {
            CameraPose::orbit(ORBIT_RADIUS, 360.0 * i as f64 / n as f64, 0.0, FOV_DEG, size, size)
                .expect("orbit cameras are valid")
        })
        .collect()
}

fn write_views(dir: &Path, prefix: &str, views: &Tensor) -> Result<()> {
    let size = views.dim(2)?;
    for (i, img) in tensor_to_images(views)?.iter().enumerate() {
        write_png(&dir.join(format!("{prefix}_{i:02}.png")), img, size, size)?;
    }
    Ok(())
}

fn write_cloud_outputs(dir: &Path, stem: &str, cloud: &GaussianCloud) -> Result<()> {
    save_cloud(&dir.join(format!("{stem}.ftc")), cloud)?;
    let mut ply = Vec::new();
    write_ply(cloud, &mut ply)?;
    fs::write(dir.join(format!("{stem}.ply")), ply)?;
    Ok(())
}

fn sample_cmd(cfg: &Config) -> Result<()> {
    let device = Device::Cpu;
    let ckpt = path_key(cfg, "checkpoint")?;
    let out = path_key(cfg, "out_dir")?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let mode: Mode = cfg.get_or("mode", Mode::ImageTo3d)?;
    let models = Models::load(&ckpt, &device)?;
    check_architecture(&models, cfg)?;

    let scene = match cfg.get::<String>("scene_dir")? {
        Some(d) => Some(SceneData::load(Path::new(&d))?),
        None => None,
    };
    let n_views: usize = cfg.get_or("n_views", dataset::NUM_INPUT)?;
    let (input, cameras, scene_tokens) = match (&scene, cfg.get::<String>("input_image")?) {
        (_, Some(png)) => {
            let (img, w, h) = read_png(Path::new(&png))?;
            if w != h || w % 4 != 0 {
                return Err(gencycle::Error::config("input_image", format!("need a square image with side divisible by 4, got {w}x{h}")).into());
            }
            let t = images_to_tensor(&[&img], w, &device)?.squeeze(0)?;
            (Some(t), default_cameras(n_views, w), Vec::new())
        }
        (Some(s), None) => {
            let views = s.views.input_views();
            let imgs: Vec<&[f64]> = views.iter().map(|&v| s.views.images[v].as_slice()).collect();
            let t = images_to_tensor(&imgs[..1], s.views.size, &device)?.squeeze(0)?;
            (Some(t), s.views.cameras(&views), s.tokens())
        }
        (None, None) => {
            let size: usize = cfg.get_or("image_size", 64)?;
            (None, default_cameras(n_views, size), Vec::new())
        }
    };
    if mode == Mode::ImageTo3d && input.is_none() {
        return Err(gencycle::Error::config("input_image", "image_to_3d needs input_image or scene_dir").into());
    }
    let base = match cfg.raw("prompt") {
        Some(p) => parse_prompt(p)?,
        None => scene_tokens,
    };
    let tokens = match cfg.raw("view_prompts") {
        Some(vp) => parse_view_prompts(vp, &base, cameras.len())?,
        None => vec![base],
    };
    let prior_kind: String = cfg.get_or("prior", if scene.is_some() { "oracle_perturbed" } else { "pure_noise" }.to_string())?;
    let prior_store;
    let prior = match prior_kind.as_str() {
        "oracle_perturbed" => {
            let s = scene
                .as_ref()
                .ok_or_else(|| gencycle::Error::config("scene_dir", "the oracle_perturbed prior needs a scene"))?;
            let views = s.views.input_views();
            let imgs: Vec<&[f64]> = views.iter().map(|&v| s.views.images[v].as_slice()).collect();
            PriorProvider::OraclePerturbed {
                views: images_to_tensor(&imgs, s.views.size, &device)?,
                perturb: PerturbConfig {
                    hue_sigma: cfg.get_or("hue_sigma", 0.2)?,
                    brightness_sigma: cfg.get_or("brightness_sigma", 0.0)?,
                    warp_px: cfg.get_or("warp_px", 2.0)?,
                    texture_sigma: cfg.get_or("texture_sigma", 0.0)?,
                    exempt: None,
                },
                seed: rng::child_seed(seed, "prior.perturb"),
            }
        }
        "learned_multiview" => {
            let path = path_key(cfg, "prior_checkpoint")?;
            prior_store = load_denoiser(&path.join(gencycle::pipeline::DENOISER_FILE), &device)?;
            PriorProvider::LearnedMultiview { denoiser: &prior_store.1, schedule: &prior_store.0 }
        }
        "pure_noise" => PriorProvider::PureNoise,
        other => return Err(gencycle::Error::config("prior", format!("unknown prior `{other}`")).into()),
    };
    let dump = cfg.get_bool("dump_steps", false)?;
    let use_features = cfg.get_bool("feature_interaction", true)?;
    let req = SampleRequest {
        mode,
        input,
        tokens: tokens.clone(),
        cameras: cameras.clone(),
        steps: cfg.get_or("steps", 30)?,
        guidance_scale: cfg.get_or("cfg_scale", 1.0)?,
        inversion_refine: cfg.get_or("inversion_refine", 2)?,
        use_features,
        seed,
        keep_trace: dump,
    };
    if req.steps == 0 || req.steps > models.schedule.num_steps() {
        return Err(gencycle::Error::config("steps", format!("must be in 1..={}", models.schedule.num_steps())).into());
    }
    let mut manifest = RunManifest::start("sample", cfg, seed);
    let result = sample(&models, &prior, &req)?;
    fs::create_dir_all(&out)?;
    let cloud = tensor_to_cloud(&result.cloud)?;
    write_cloud_outputs(&out, "cloud", &cloud)?;
    write_views(&out, "view", &result.views)?;
    if let Some(p) = &result.prior {
        write_views(&out, "prior", p)?;
        let baseline = tensor_to_cloud(&single_pass(&models, p, &cameras, &tokens, use_features)?)?;
        write_cloud_outputs(&out, "single_pass", &baseline)?;
    }
    if dump {
        let steps_dir = out.join("steps");
        fs::create_dir_all(&steps_dir)?;
        for (i, step) in result.trace.iter().enumerate() {
            write_views(&steps_dir, &format!("step{i:03}_t{:04}_x0hat", step.t), &to_image_space(&step.x0_hat)?)?;
            write_views(&steps_dir, &format!("step{i:03}_t{:04}_x0prime", step.t), &to_image_space(&step.x0_rendered)?)?;
        }
    }
    manifest.path("checkpoint", &ckpt);
    manifest.path("output", &out);
    manifest.record("mode", format!("{mode:?}"));
    manifest.record("prior", &prior_kind);
    manifest.record("gaussians", cloud.len());
    manifest.write(&out)?;
    Ok(())
}

fn eval(cfg: &Config) -> Result<()> {
    let cloud_path = path_key(cfg, "cloud")?;
    let scene_dir = path_key(cfg, "scene_dir")?;
    let out = path_key(cfg, "out_dir")?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let scene = SceneData::load(&scene_dir).with_context(|| format!("ground truth {}", scene_dir.display()))?;
    let cloud = load_cloud(&cloud_path)?;
    let mut manifest = RunManifest::start("eval", cfg, seed);
    let perceptual = Perceptual::new(&Device::Cpu)?;
    let views = scene.views.held_out_views();
    let mut report = evaluate_cloud(&cloud, &scene, &views, &perceptual)?;
    report.config_hash = cfg.hash();
    fs::create_dir_all(&out)?;
    fs::write(out.join("eval.txt"), report.to_kv())?;
    fs::write(out.join("eval.csv"), report.to_csv())?;
    log::info!("mean PSNR {:.3} dB over {} views", report.mean_psnr(), views.len());
    manifest.path("cloud", &cloud_path);
    manifest.path("scene", &scene_dir);
    manifest.path("output", &out);
    manifest.write(&out)?;
    Ok(())
}

/// Azimuth of frame `i` of `n`; frame `n` wraps to frame 0.
pub fn turntable_azimuth(i: usize, n: usize) -> f64 {
    360.0 * (i % n) as f64 / n as f64
}

fn turntable(cfg: &Config) -> Result<()> {
    let cloud_path = path_key(cfg, "cloud")?;
    let out = path_key(cfg, "out_dir")?;
    let n: usize = cfg.get_or("n_frames", 36)?;
    let size: usize = cfg.get_or("image_size", 64)?;
    let elevation: f64 = cfg.get_or("elevation_deg", 15.0)?;
    let radius: f64 = cfg.get_or("radius", ORBIT_RADIUS)?;
    if n == 0 {
        return Err(gencycle::Error::config("n_frames", "must be positive").into());
    }
    let cloud = load_cloud(&cloud_path)?;
    let mut manifest = RunManifest::start("turntable", cfg, 0);
    fs::create_dir_all(&out)?;
    for i in 0..n {
        let cam = CameraPose::orbit(radius, turntable_azimuth(i, n), elevation, FOV_DEG, size, size)
            .map_err(|e| gencycle::Error::config("radius", e.to_string()))?;
        let frame = render(&cloud, &cam, BACKGROUND, &RenderSettings::default());
        write_png(&out.join(format!("frame_{i:04}.png")), &frame.image, size, size)?;
    }
    manifest.path("cloud", &cloud_path);
    manifest.path("output", &out);
    manifest.record("n_frames", n);
    manifest.write(&out)?;
    Ok(())
}
