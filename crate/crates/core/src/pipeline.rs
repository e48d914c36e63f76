//! Joint training of the denoiser and reconstructor, and the generation-reconstruction
//! sampling cycle.
//!
//! Images enter the diffusion space as `2 I - 1`; the reconstructor and renderer work
//! on `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use gencycle_render::{render, CameraPose, GaussianCloud, RenderSettings, PACKED_STRIDE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::dataset::{self, PerturbConfig, SceneData, BACKGROUND};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserFeatures, DenoiserInput};
use crate::ftc::{FtcTensor, TensorFile};
use crate::loss::{self, compute_loss, Perceptual};
use crate::metrics::{self, EvalReport, ViewObservation};
use crate::nn::{clip_grad_norm, AdamW};
use crate::reconstructor::{ReconConfig, Reconstructor};
use crate::scheduler::{grid_prev, make_step_grid, NoiseSchedule, ScheduleKind};
use crate::splat_op::render_tensor;
use crate::{rng, Error, Result};

pub const DENOISER_FILE: &str = "denoiser.ftc";
pub const RECON_FILE: &str = "reconstructor.ftc";
pub const OPTIM_FILE: &str = "optimizer.ftc";
/// Slot of the condition image among the working views.
pub const REFERENCE_SLOT: usize = 0;

/// `[V, 3, H, W]` tensor from `H x W x 3` images.
pub fn images_to_tensor(images: &[&[f64]], size: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.len() != size * size * 3 {
            return Err(Error::Shape(format!("image has {} values, expected {}", img.len(), size * size * 3)));
        }
        for c in 0..3 {
            data.extend((0..size * size).map(|p| img[p * 3 + c] as f32));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), device)?)
}

/// Inverse of [`images_to_tensor`].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (v, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..v)
        .map(|i| {
            let base = i * 3 * h * w;
            (0..h * w).flat_map(|p| (0..3).map(move |c| base + c * h * w + p)).map(|k| data[k]).collect()
        })
        .collect())
}

fn masks_to_tensor(masks: &[&[f64]], size: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = masks.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, size, size), device)?)
}

pub fn to_diffusion_space(images: &Tensor) -> Result<Tensor> {
    Ok(images.affine(2.0, -1.0)?)
}

/// Decode boundary: `[-1, 1]` to `[0, 1]`, clamped.
pub fn to_image_space(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.5)?.clamp(0.0, 1.0)?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Renders `packed` Gaussians at every camera, `[S, 4, H, W]`.
pub fn render_views(packed: &Tensor, cameras: &[CameraPose]) -> Result<Tensor> {
    let renders = cameras.iter().map(|c| render_tensor(packed, c, BACKGROUND)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&renders, 0)?)
}

/// Architecture and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub denoiser_width: usize,
    pub recon_width: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            denoiser_width: 32,
            recon_width: 32,
            diffusion_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            schedule: ScheduleKind::ScaledLinear,
        }
    }
}

impl ModelConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let out = Self {
            image_size: cfg.get_or("image_size", d.image_size)?,
            denoiser_width: cfg.get_or("denoiser_width", d.denoiser_width)?,
            recon_width: cfg.get_or("recon_width", d.recon_width)?,
            diffusion_steps: cfg.get_or("diffusion_steps", d.diffusion_steps)?,
            beta_start: cfg.get_or("beta_start", d.beta_start)?,
            beta_end: cfg.get_or("beta_end", d.beta_end)?,
            schedule: cfg.get_or("schedule", d.schedule)?,
        };
        if out.image_size == 0 || out.image_size % 4 != 0 {
            return Err(Error::config("image_size", "must be a positive multiple of 4"));
        }
        Ok(out)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig { width: self.denoiser_width, vocab_size: dataset::VOCAB_SIZE, max_timestep: self.diffusion_steps }
    }
}

pub struct Models {
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub recon: Reconstructor,
}

impl Models {
    pub fn new(cfg: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        let schedule = NoiseSchedule::new(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.schedule)?;
        let dcfg = cfg.denoiser();
        let rcfg = ReconConfig {
            width: cfg.recon_width,
            time_dim: dcfg.time_dim(),
            feature_channels: [dcfg.feature_channels()[0], dcfg.feature_channels()[1]],
        };
        let denoiser = Denoiser::new(dcfg, rng::child_seed(seed, "init.denoiser"), device)?;
        let recon = Reconstructor::new(rcfg, rng::child_seed(seed, "init.reconstructor"), device)?;
        Ok(Self { schedule, denoiser, recon })
    }

    pub fn device(&self) -> &Device {
        self.denoiser.store().device()
    }

    pub fn denoiser_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        f.insert("arch.schedule.betas", FtcTensor::from_f64(vec![self.schedule.num_steps()], self.schedule.betas())?);
        self.denoiser.save_into(&mut f, "denoiser.")?;
        Ok(f)
    }

    pub fn recon_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        self.recon.save_into(&mut f, "recon.")?;
        Ok(f)
    }

    /// Writes [`DENOISER_FILE`] and [`RECON_FILE`] into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.denoiser_file()?.save(dir.join(DENOISER_FILE))?;
        self.recon_file()?.save(dir.join(RECON_FILE))
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let (schedule, denoiser) = load_denoiser(&dir.join(DENOISER_FILE), device)?;
        let f = TensorFile::load(dir.join(RECON_FILE))?;
        let recon = Reconstructor::load_from(&f, "recon.", device)?;
        if recon.config().time_dim != denoiser.config().time_dim() {
            return Err(Error::CheckpointMismatch(format!(
                "reconstructor expects time_dim {}, denoiser provides {}",
                recon.config().time_dim,
                denoiser.config().time_dim()
            )));
        }
        Ok(Self { schedule, denoiser, recon })
    }

    /// Errors when the stored architecture differs from `cfg`.
    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<()> {
        let d = self.denoiser.config();
        let mut diffs = Vec::new();
        if d.width != cfg.denoiser_width {
            diffs.push(format!("denoiser_width {} vs {}", d.width, cfg.denoiser_width));
        }
        if self.recon.config().width != cfg.recon_width {
            diffs.push(format!("recon_width {} vs {}", self.recon.config().width, cfg.recon_width));
        }
        if self.schedule.num_steps() != cfg.diffusion_steps {
            diffs.push(format!("diffusion_steps {} vs {}", self.schedule.num_steps(), cfg.diffusion_steps));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(format!("checkpoint/config differ: {}", diffs.join(", "))))
        }
    }
}

/// Loads a schedule and denoiser from a denoiser checkpoint file.
pub fn load_denoiser(path: &Path, device: &Device) -> Result<(NoiseSchedule, Denoiser)> {
    let f = TensorFile::load(path)?;
    let schedule = NoiseSchedule::from_betas(f.require("arch.schedule.betas")?.to_f64())?;
    let denoiser = Denoiser::load_from(&f, "denoiser.", device)?;
    if denoiser.config().max_timestep != schedule.num_steps() {
        return Err(Error::CheckpointMismatch("denoiser timestep range differs from its schedule".into()));
    }
    Ok((schedule, denoiser))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub lambda_perceptual: f64,
    pub prompt_dropout: f64,
    pub reference_noisy_prob: f64,
    pub batch_size: usize,
    /// Only the reconstructor is updated; the denoiser stays bit-identical.
    pub frozen_2d: bool,
    pub feature_interaction: bool,
    /// Keep the interaction gates at zero (ablation).
    pub freeze_gates: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            epochs: 30,
            grad_clip_norm: 1.0,
            lambda_perceptual: 0.5,
            prompt_dropout: 0.3,
            reference_noisy_prob: 0.3,
            batch_size: 1,
            frozen_2d: false,
            feature_interaction: true,
            freeze_gates: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let out = Self {
            learning_rate: cfg.get_or("learning_rate", d.learning_rate)?,
            weight_decay: cfg.get_or("weight_decay", d.weight_decay)?,
            epochs: cfg.get_or("epochs", d.epochs)?,
            grad_clip_norm: cfg.get_or("grad_clip_norm", d.grad_clip_norm)?,
            lambda_perceptual: cfg.get_or("lambda_perceptual", d.lambda_perceptual)?,
            prompt_dropout: cfg.get_or("prompt_dropout", d.prompt_dropout)?,
            reference_noisy_prob: cfg.get_or("reference_noisy_prob", d.reference_noisy_prob)?,
            batch_size: cfg.get_or("batch_size", d.batch_size)?,
            frozen_2d: cfg.get_bool("frozen_2d", d.frozen_2d)?,
            feature_interaction: cfg.get_bool("feature_interaction", d.feature_interaction)?,
            freeze_gates: false,
            seed: cfg.get_or("seed", d.seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("prompt_dropout", self.prompt_dropout), ("reference_noisy_prob", self.reference_noisy_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        for (key, v) in [("learning_rate", self.learning_rate), ("grad_clip_norm", self.grad_clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.weight_decay < 0.0 || self.lambda_perceptual < 0.0 {
            return Err(Error::config("weight_decay", "weights must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// A scene prepared for training.
pub struct TrainSample {
    /// Input views `[4, 3, H, W]` in `[0, 1]`.
    pub inputs: Tensor,
    pub input_cameras: Vec<CameraPose>,
    /// The 12 supervised views (inputs first), `[12, 3, H, W]` and `[12, 1, H, W]`.
    pub images: Tensor,
    pub masks: Tensor,
    pub cameras: Vec<CameraPose>,
    pub tokens: Vec<u32>,
}

impl TrainSample {
    pub fn from_scene(scene: &SceneData, device: &Device) -> Result<Self> {
        let vs = &scene.views;
        let inputs = vs.input_views();
        let train = vs.training_views();
        fn pick<'a>(set: &'a [Vec<f64>], idx: &[usize]) -> Vec<&'a [f64]> {
            idx.iter().map(|&i| set[i].as_slice()).collect()
        }
        Ok(Self {
            inputs: images_to_tensor(&pick(&vs.images, &inputs), vs.size, device)?,
            input_cameras: vs.cameras(&inputs),
            images: images_to_tensor(&pick(&vs.images, &train), vs.size, device)?,
            masks: masks_to_tensor(&pick(&vs.masks, &train), vs.size, device)?,
            cameras: vs.cameras(&train),
            tokens: scene.tokens(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Denoiser only, noise-prediction loss.
    Pretrain,
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub phase: Phase,
    /// The optimized objective.
    pub total: f64,
    pub image: f64,
    pub mask: f64,
    pub perceptual: f64,
    pub eps: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,phase,L_total,L_img,L_mask,L_perceptual,L_eps,grad_norm,clipped";

    pub fn csv_row(&self) -> String {
        let phase = match self.phase {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        };
        format!(
            "{},{phase},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            self.step, self.total, self.image, self.mask, self.perceptual, self.eps, self.grad_norm, self.clipped as u8
        )
    }
}

/// Noised working views of one training sample.
struct NoisedViews {
    x_t: Tensor,
    eps: Tensor,
    t: Vec<usize>,
    tokens: Vec<u32>,
}

pub struct Trainer {
    pub models: Models,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    perceptual: Perceptual,
    step: u64,
}

impl Trainer {
    pub fn new(mut models: Models, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.frozen_2d {
            models.denoiser.store_mut().set_trainable("", false);
        }
        if config.freeze_gates || !config.feature_interaction {
            models.recon.freeze_interaction_gates();
        }
        let perceptual = Perceptual::new(models.device())?;
        let optimizer = AdamW::new(config.learning_rate, config.weight_decay);
        Ok(Self { models, config, optimizer, perceptual, step: 0 })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn perceptual(&self) -> &Perceptual {
        &self.perceptual
    }

    /// Per-step randomness is derived from `(seed, step)` so resumed runs replay exactly.
    fn step_rng(&self) -> ChaCha8Rng {
        rng::stream(self.config.seed, &format!("train.step.{}", self.step))
    }

    fn noise(&self, sample: &TrainSample, rng: &mut ChaCha8Rng) -> Result<NoisedViews> {
        let big_t = self.models.schedule.num_steps();
        let v = sample.inputs.dim(0)?;
        let t_draw = rng.random_range(1..=big_t);
        let ref_noisy = rng.random_bool(self.config.reference_noisy_prob);
        let drop_prompt = rng.random_bool(self.config.prompt_dropout);
        let t: Vec<usize> = (0..v).map(|i| if i == REFERENCE_SLOT && !ref_noisy { 0 } else { t_draw }).collect();
        let x0 = to_diffusion_space(&sample.inputs)?;
        let eps = rng::normal_tensor(rng, x0.dims(), DType::F32, x0.device())?;
        let x_t = self.models.schedule.q_sample(&x0, &t, &eps)?;
        let tokens = if drop_prompt { Vec::new() } else { sample.tokens.clone() };
        Ok(NoisedViews { x_t, eps, t, tokens })
    }

    /// Mean squared noise error over the views with `t > 0`.
    fn eps_loss(eps_pred: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Option<Tensor>> {
        let noisy: Vec<u32> = t.iter().enumerate().filter(|(_, &t)| t > 0).map(|(i, _)| i as u32).collect();
        if noisy.is_empty() {
            return Ok(None);
        }
        let idx = Tensor::new(noisy.as_slice(), eps.device())?;
        let d = (eps_pred.index_select(&idx, 0)? - eps.index_select(&idx, 0)?)?;
        Ok(Some(d.sqr()?.mean_all()?))
    }

    fn apply(&mut self, objective: &Tensor) -> Result<(f64, bool)> {
        let value = loss::scalar(objective)?;
        if !value.is_finite() {
            log::error!("non-finite loss at step {}; update skipped", self.step);
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        let mut grads = objective.backward()?;
        let stores = [self.models.denoiser.store(), self.models.recon.store()];
        let norm = clip_grad_norm(&stores, &mut grads, self.config.grad_clip_norm)?;
        self.optimizer.step(&[("denoiser.", stores[0]), ("recon.", stores[1])], &grads)?;
        Ok((norm, norm > self.config.grad_clip_norm))
    }

    fn batch<'a>(samples: &'a [TrainSample], rng: &mut ChaCha8Rng, size: usize) -> Vec<&'a TrainSample> {
        (0..size).map(|_| &samples[rng.random_range(0..samples.len())]).collect()
    }

    /// Noise-prediction step for the denoiser alone.
    pub fn pretrain_step(&mut self, samples: &[TrainSample]) -> Result<StepStats> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        if self.config.frozen_2d {
            return Err(Error::InvalidArgument("denoiser pretraining with frozen_2d set".into()));
        }
        let mut rng = self.step_rng();
        let mut terms = Vec::new();
        for sample in Self::batch(samples, &mut rng, self.config.batch_size) {
            let n = self.noise(sample, &mut rng)?;
            let tokens = [n.tokens.clone()];
            let input = DenoiserInput { x: &n.x_t, t: &n.t, tokens: &tokens, reference: Some(REFERENCE_SLOT) };
            let (eps_pred, _) = self.models.denoiser.forward(&input)?;
            if let Some(l) = Self::eps_loss(&eps_pred, &n.eps, &n.t)? {
                terms.push(l);
            }
        }
        let objective = if terms.is_empty() {
            Tensor::zeros((), DType::F32, self.models.device())?
        } else {
            (Tensor::stack(&terms, 0)?.mean(0))?
        };
        let value = loss::scalar(&objective)?;
        let (grad_norm, clipped) = if terms.is_empty() { (0.0, false) } else { self.apply(&objective)? };
        let stats = StepStats {
            step: self.step,
            phase: Phase::Pretrain,
            total: value,
            image: 0.0,
            mask: 0.0,
            perceptual: 0.0,
            eps: value,
            grad_norm,
            clipped,
        };
        self.step += 1;
        Ok(stats)
    }

    /// One joint step: noise the input views, estimate `x̂₀`, reconstruct Gaussians,
    /// render all supervised poses and descend on the rendering loss (plus the noise
    /// loss when the denoiser is trainable).
    pub fn train_step(&mut self, samples: &[TrainSample]) -> Result<StepStats> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let mut rng = self.step_rng();
        let (mut totals, mut img, mut mask, mut perc, mut eps_terms) = (Vec::new(), 0.0, 0.0, 0.0, Vec::new());
        let batch = Self::batch(samples, &mut rng, self.config.batch_size);
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            let n = self.noise(sample, &mut rng)?;
            let tokens = [n.tokens.clone()];
            let input = DenoiserInput { x: &n.x_t, t: &n.t, tokens: &tokens, reference: Some(REFERENCE_SLOT) };
            let (eps_pred, feats) = self.models.denoiser.forward(&input)?;
            let x0_hat = self.models.schedule.estimate_x0(&n.x_t, &eps_pred.detach(), &n.t)?;
            let views = to_image_space(&x0_hat)?;
            let t_emb = self.models.denoiser.per_view_time_embed(&n.t)?.detach();
            let feats = feats.detach();
            let feats = self.config.feature_interaction.then_some(&feats);
            let packed = self.models.recon.reconstruct(&views, &sample.input_cameras, &t_emb, feats)?;
            let renders = render_views(&packed, &sample.cameras)?;
            let parts =
                compute_loss(&renders, &sample.images, &sample.masks, self.config.lambda_perceptual, &self.perceptual)?;
            img += loss::scalar(&parts.image)? * scale;
            mask += loss::scalar(&parts.mask)? * scale;
            perc += loss::scalar(&parts.perceptual)? * scale;
            totals.push(parts.total);
            if let Some(l) = Self::eps_loss(&eps_pred, &n.eps, &n.t)? {
                eps_terms.push(l);
            }
        }
        let recon_total = (Tensor::stack(&totals, 0)?.mean(0))?;
        let eps_mean = if eps_terms.is_empty() { None } else { Some(Tensor::stack(&eps_terms, 0)?.mean(0)?) };
        let eps_value = match &eps_mean {
            Some(e) => loss::scalar(e)?,
            None => 0.0,
        };
        let objective = match (&eps_mean, self.config.frozen_2d) {
            (Some(e), false) => (&recon_total + e)?,
            _ => recon_total,
        };
        let total = loss::scalar(&objective)?;
        let (grad_norm, clipped) = self.apply(&objective)?;
        let stats = StepStats {
            step: self.step,
            phase: Phase::Joint,
            total,
            image: img,
            mask,
            perceptual: perc,
            eps: eps_value,
            grad_norm,
            clipped,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Models plus optimizer state and step counter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.models.save(dir)?;
        let mut f = TensorFile::new();
        f.insert("train.step", FtcTensor::from_f64(vec![], &[self.step as f64])?);
        self.optimizer.write_into(&mut f)?;
        f.save(dir.join(OPTIM_FILE))
    }

    pub fn resume(dir: &Path, config: TrainConfig, device: &Device) -> Result<Self> {
        let models = Models::load(dir, device)?;
        let mut trainer = Self::new(models, config)?;
        let f = TensorFile::load(dir.join(OPTIM_FILE))?;
        trainer.step = f.scalar("train.step")? as u64;
        trainer.optimizer.read_from(&f, device)?;
        Ok(trainer)
    }
}

/// Noise prediction for one sampler step.
pub struct Prediction {
    pub eps: Tensor,
    pub features: Option<DenoiserFeatures>,
}

pub trait NoisePredictor {
    fn predict(&mut self, x_t: &Tensor, t: &[usize]) -> Result<Prediction>;
}

/// Produces the corrected clean estimate `x̂₀'` and, at the end, the Gaussians.
pub trait ConsistencyStage {
    fn correct(&mut self, x0_hat: &Tensor, t: &[usize], prediction: &Prediction) -> Result<Tensor>;

    /// Final 3D output from the clean views (`None` when the stage has no 3D model).
    fn finalize(&mut self, x0: &Tensor, prediction: &Prediction) -> Result<Option<Tensor>>;
}

/// The trained denoiser with optional guidance and reference injection.
pub struct NetworkPredictor<'a> {
    pub denoiser: &'a Denoiser,
    /// One token list shared by all views, or one per view.
    pub tokens: Vec<Vec<u32>>,
    pub guidance_scale: f64,
    pub reference: Option<usize>,
}

impl NoisePredictor for NetworkPredictor<'_> {
    fn predict(&mut self, x_t: &Tensor, t: &[usize]) -> Result<Prediction> {
        let input = DenoiserInput { x: x_t, t, tokens: &self.tokens, reference: self.reference };
        let (eps, features) = self.denoiser.predict_noise(&input, self.guidance_scale)?;
        // Sampling never backpropagates; detaching keeps the graph from growing across steps.
        Ok(Prediction { eps: eps.detach(), features: Some(features.detach()) })
    }
}

impl<F: FnMut(&Tensor, &[usize]) -> Result<Tensor>> NoisePredictor for F {
    fn predict(&mut self, x_t: &Tensor, t: &[usize]) -> Result<Prediction> {
        Ok(Prediction { eps: self(x_t, t)?, features: None })
    }
}

/// Reconstruct Gaussians from `x̂₀` and re-render them at the working poses.
pub struct ReconstructStage<'a> {
    pub recon: &'a Reconstructor,
    /// Supplies the per-view timestep embedding.
    pub denoiser: &'a Denoiser,
    pub cameras: Vec<CameraPose>,
    pub use_features: bool,
}

impl ReconstructStage<'_> {
    fn gaussians(&self, x0: &Tensor, t: &[usize], prediction: &Prediction) -> Result<Tensor> {
        let views = to_image_space(x0)?;
        let t_full: Vec<usize> = if t.len() == 1 { vec![t[0]; views.dim(0)?] } else { t.to_vec() };
        let t_emb = self.denoiser.per_view_time_embed(&t_full)?;
        let feats = if self.use_features { prediction.features.as_ref() } else { None };
        self.recon.reconstruct(&views, &self.cameras, &t_emb, feats)
    }
}

impl ConsistencyStage for ReconstructStage<'_> {
    fn correct(&mut self, x0_hat: &Tensor, t: &[usize], prediction: &Prediction) -> Result<Tensor> {
        let packed = self.gaussians(x0_hat, t, prediction)?.detach();
        let rgb = render_views(&packed, &self.cameras)?.narrow(1, 0, 3)?;
        Ok(to_diffusion_space(&rgb)?.to_dtype(x0_hat.dtype())?.detach())
    }

    fn finalize(&mut self, x0: &Tensor, prediction: &Prediction) -> Result<Option<Tensor>> {
        Ok(Some(self.gaussians(x0, &[0], prediction)?.detach()))
    }
}

/// `x̂₀' = x̂₀`: the cycle degenerates to the plain posterior-mean sampler.
pub struct IdentityStage;

impl ConsistencyStage for IdentityStage {
    fn correct(&mut self, x0_hat: &Tensor, _t: &[usize], _prediction: &Prediction) -> Result<Tensor> {
        Ok(x0_hat.clone())
    }

    fn finalize(&mut self, _x0: &Tensor, _prediction: &Prediction) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// One sampler iteration, all in diffusion space.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub t: usize,
    pub x_t: Tensor,
    pub x0_hat: Tensor,
    pub x0_rendered: Tensor,
}

pub struct CycleOutput {
    /// Clean views `[V, 3, H, W]` in `[-1, 1]`.
    pub x0: Tensor,
    /// Packed Gaussians from the final reconstruction.
    pub cloud: Option<Tensor>,
    pub trace: Vec<TraceStep>,
}

fn set_slot(x: &Tensor, slot: usize, value: &Tensor) -> Result<Tensor> {
    let v = x.dim(0)?;
    let mut parts = Vec::with_capacity(3);
    if slot > 0 {
        parts.push(x.narrow(0, 0, slot)?);
    }
    parts.push(value.unsqueeze(0)?.to_dtype(x.dtype())?);
    if slot + 1 < v {
        parts.push(x.narrow(0, slot + 1, v - slot - 1)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn per_view_t(v: usize, t: usize, reference: Option<usize>) -> Vec<usize> {
    (0..v).map(|i| if Some(i) == reference { 0 } else { t }).collect()
}

/// Cycle sampling over the descending `grid`. `reference` is the clean condition view
/// `[3, H, W]` in diffusion space, held at `t = 0` in [`REFERENCE_SLOT`].
pub fn cycle_sample(
    schedule: &NoiseSchedule,
    predictor: &mut dyn NoisePredictor,
    stage: &mut dyn ConsistencyStage,
    x_init: &Tensor,
    reference: Option<&Tensor>,
    grid: &[usize],
    keep_trace: bool,
) -> Result<CycleOutput> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("step grid must be non-empty and strictly decreasing".into()));
    }
    let v = x_init.dim(0)?;
    let ref_slot = reference.map(|_| REFERENCE_SLOT);
    let pin = |x: &Tensor| -> Result<Tensor> {
        match reference {
            Some(r) => set_slot(x, REFERENCE_SLOT, r),
            None => Ok(x.clone()),
        }
    };
    let mut x = pin(x_init)?;
    let mut trace = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        let t_vec = per_view_t(v, t, ref_slot);
        let pred = predictor.predict(&x, &t_vec)?;
        let x0_hat = schedule.estimate_x0(&x, &pred.eps, &t_vec)?;
        let x0_rendered = stage.correct(&x0_hat, &t_vec, &pred)?;
        let next = schedule.cycle_backward_step_to(&x, &x0_rendered, t, grid_prev(grid, i))?;
        if !all_finite(&next)? {
            return Err(Error::NonFinite(format!(
                "sampler state after step {i} (t={t}): x_t finite={}, eps finite={}, x0_hat finite={}, x0' finite={}",
                all_finite(&x)?,
                all_finite(&pred.eps)?,
                all_finite(&x0_hat)?,
                all_finite(&x0_rendered)?
            )));
        }
        if keep_trace {
            trace.push(TraceStep { t, x_t: x.clone(), x0_hat, x0_rendered });
        }
        x = pin(&next)?;
    }
    let pred = predictor.predict(&x, &vec![0; v])?;
    let cloud = stage.finalize(&x, &pred)?;
    Ok(CycleOutput { x0: x, cloud, trace })
}

/// Maps clean views (diffusion space) to `x_T` at `grid[0]` by DDIM inversion. The
/// reference slot, when given, is presented clean at `t = 0` to every predictor call.
pub fn invert_prior(
    schedule: &NoiseSchedule,
    predictor: &mut dyn NoisePredictor,
    x0: &Tensor,
    reference: Option<&Tensor>,
    grid: &[usize],
    refine: usize,
) -> Result<Tensor> {
    let v = x0.dim(0)?;
    let ref_slot = reference.map(|_| REFERENCE_SLOT);
    schedule.ddim_invert(x0, grid, refine, |x, t| {
        let x = match reference {
            Some(r) => set_slot(x, REFERENCE_SLOT, r)?,
            None => x.clone(),
        };
        Ok(predictor.predict(&x, &per_view_t(v, t, ref_slot))?.eps)
    })
}

/// Plain deterministic DDIM sampling (no reconstruction), used by the learned prior.
pub fn ddim_sample(
    schedule: &NoiseSchedule,
    predictor: &mut dyn NoisePredictor,
    x_init: &Tensor,
    reference: Option<&Tensor>,
    grid: &[usize],
) -> Result<Tensor> {
    let v = x_init.dim(0)?;
    let ref_slot = reference.map(|_| REFERENCE_SLOT);
    let pin = |x: &Tensor| -> Result<Tensor> {
        match reference {
            Some(r) => set_slot(x, REFERENCE_SLOT, r),
            None => Ok(x.clone()),
        }
    };
    let mut x = pin(x_init)?;
    for (i, &t) in grid.iter().enumerate() {
        let t_vec = per_view_t(v, t, ref_slot);
        let eps = predictor.predict(&x, &t_vec)?.eps;
        let prev = per_view_t(v, grid_prev(grid, i), ref_slot);
        x = pin(&schedule.ddim_step(&x, &eps, &t_vec, &prev, 0.0, None)?)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ImageTo3d,
    TextTo3d,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_to_3d" => Ok(Self::ImageTo3d),
            "text_to_3d" => Ok(Self::TextTo3d),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Source of the initial multi-view prior.
pub enum PriorProvider<'a> {
    /// Ground-truth renders at the working poses, independently perturbed per view.
    OraclePerturbed { views: Tensor, perturb: PerturbConfig, seed: u64 },
    /// Plain DDIM samples of a separately trained denoiser.
    LearnedMultiview { denoiser: &'a Denoiser, schedule: &'a NoiseSchedule },
    PureNoise,
}

impl PriorProvider<'_> {
    /// Prior views `[V, 3, H, W]` in `[0, 1]`, or `None` for pure noise.
    pub fn views(&self, req: &SampleRequest, size: usize, device: &Device) -> Result<Option<Tensor>> {
        match self {
            Self::OraclePerturbed { views, perturb, seed } => {
                if views.dim(0)? != req.cameras.len() {
                    return Err(Error::Shape(format!("{} prior views for {} cameras", views.dim(0)?, req.cameras.len())));
                }
                let mut perturb = *perturb;
                if req.mode == Mode::ImageTo3d {
                    perturb.exempt = Some(REFERENCE_SLOT);
                }
                let imgs = tensor_to_images(views)?;
                let out = dataset::perturb_views(&imgs, size, &perturb, *seed);
                let refs: Vec<&[f64]> = out.iter().map(|v| v.as_slice()).collect();
                Ok(Some(images_to_tensor(&refs, size, device)?))
            }
            Self::LearnedMultiview { denoiser, schedule } => {
                let grid = make_step_grid(schedule.num_steps(), req.steps.min(schedule.num_steps()))?;
                let mut rng = rng::stream(req.seed, "prior.noise");
                let x_init = rng::normal_tensor(&mut rng, &[req.cameras.len(), 3, size, size], DType::F32, device)?;
                let reference = req.reference_diffusion()?;
                let mut pred = NetworkPredictor {
                    denoiser,
                    tokens: req.tokens.clone(),
                    guidance_scale: req.guidance_scale,
                    reference: reference.as_ref().map(|_| REFERENCE_SLOT),
                };
                let x0 = ddim_sample(schedule, &mut pred, &x_init, reference.as_ref(), &grid)?;
                Ok(Some(to_image_space(&x0)?))
            }
            Self::PureNoise => Ok(None),
        }
    }
}

pub struct SampleRequest {
    pub mode: Mode,
    /// Condition image `[3, H, W]` in `[0, 1]`; required for image-to-3D.
    pub input: Option<Tensor>,
    /// One token list for all views, or one per view.
    pub tokens: Vec<Vec<u32>>,
    /// Working poses; the first is the input view's pose.
    pub cameras: Vec<CameraPose>,
    pub steps: usize,
    pub guidance_scale: f64,
    pub inversion_refine: usize,
    pub use_features: bool,
    pub seed: u64,
    pub keep_trace: bool,
}

impl SampleRequest {
    fn reference_diffusion(&self) -> Result<Option<Tensor>> {
        match (&self.mode, &self.input) {
            (Mode::ImageTo3d, Some(img)) => Ok(Some(to_diffusion_space(img)?)),
            (Mode::ImageTo3d, None) => Err(Error::InvalidArgument("image_to_3d needs an input image".into())),
            (Mode::TextTo3d, _) => Ok(None),
        }
    }
}

pub struct SampleOutput {
    pub cloud: Tensor,
    /// Denoised views `[V, 3, H, W]` in `[0, 1]`.
    pub views: Tensor,
    /// Prior views before inversion, in `[0, 1]`.
    pub prior: Option<Tensor>,
    pub trace: Vec<TraceStep>,
}

/// Full generation: prior, inversion to `x_T`, then the cycle.
pub fn sample(models: &Models, prior: &PriorProvider, req: &SampleRequest) -> Result<SampleOutput> {
    if req.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if req.cameras.is_empty() {
        return Err(Error::InvalidArgument("no working cameras".into()));
    }
    let size = req.cameras[0].width;
    let device = models.device();
    let v = req.cameras.len();
    let reference = req.reference_diffusion()?;
    if let Some(r) = &reference {
        if r.dims() != [3, size, size] {
            return Err(Error::Shape(format!("input image {:?} does not match {size}x{size}", r.dims())));
        }
    }
    let grid = make_step_grid(models.schedule.num_steps(), req.steps)?;
    let ref_slot = reference.as_ref().map(|_| REFERENCE_SLOT);
    let mut predictor = NetworkPredictor {
        denoiser: &models.denoiser,
        tokens: req.tokens.clone(),
        guidance_scale: req.guidance_scale,
        reference: ref_slot,
    };
    let prior_views = prior.views(req, size, device)?;
    let x_init = match &prior_views {
        Some(p) => invert_prior(
            &models.schedule,
            &mut predictor,
            &to_diffusion_space(p)?,
            reference.as_ref(),
            &grid,
            req.inversion_refine,
        )?,
        None => rng::normal_tensor(&mut rng::stream(req.seed, "sample.noise"), &[v, 3, size, size], DType::F32, device)?,
    };
    let mut stage = ReconstructStage {
        recon: &models.recon,
        denoiser: &models.denoiser,
        cameras: req.cameras.clone(),
        use_features: req.use_features,
    };
    let out = cycle_sample(&models.schedule, &mut predictor, &mut stage, &x_init, reference.as_ref(), &grid, req.keep_trace)?;
    let cloud = out.cloud.ok_or_else(|| Error::InvalidArgument("reconstruction stage returned no cloud".into()))?;
    Ok(SampleOutput { cloud, views: to_image_space(&out.x0)?, prior: prior_views, trace: out.trace })
}

/// Baseline: one reconstruction of `views` (`[V, 3, H, W]` in `[0, 1]`) at `t = 0`.
pub fn single_pass(models: &Models, views: &Tensor, cameras: &[CameraPose], tokens: &[Vec<u32>], use_features: bool) -> Result<Tensor> {
    let x = to_diffusion_space(views)?;
    let t = vec![0; views.dim(0)?];
    let feats = if use_features {
        let input = DenoiserInput { x: &x, t: &t, tokens, reference: Some(REFERENCE_SLOT) };
        Some(models.denoiser.forward(&input)?.1)
    } else {
        None
    };
    let t_emb = models.denoiser.per_view_time_embed(&t)?;
    Ok(models.recon.reconstruct(views, cameras, &t_emb, feats.as_ref())?.detach())
}

/// Writes `cloud` as an FTC file holding one `[N, 14]` tensor named `cloud`.
pub fn save_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let mut f = TensorFile::new();
    f.insert("cloud", FtcTensor::from_f64(vec![cloud.len(), PACKED_STRIDE], &cloud.to_packed())?);
    f.save(path)
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    let f = TensorFile::load(path)?;
    let t = f.require("cloud")?;
    if t.dims.len() != 2 || t.dims[1] as usize != PACKED_STRIDE {
        return Err(Error::Container(format!("cloud tensor has dims {:?}", t.dims)));
    }
    Ok(GaussianCloud::from_packed(&t.to_f64())?)
}

/// Renders `cloud` at `views` of `scene` and scores it against the ground truth.
/// The consistency error is measured on those renders.
pub fn evaluate_cloud(
    cloud: &GaussianCloud,
    scene: &SceneData,
    views: &[usize],
    perceptual: &Perceptual,
) -> Result<EvalReport> {
    let vs = &scene.views;
    let n = vs.size;
    let cams = vs.cameras(views);
    let renders: Vec<_> = cams.iter().map(|c| render(cloud, c, BACKGROUND, &RenderSettings::default())).collect();
    let mut report = EvalReport { seed: scene.spec.seed, ..EvalReport::default() };
    for (out, &v) in renders.iter().zip(views) {
        report.psnr.push(metrics::psnr(&out.image, &vs.images[v], 1.0)?);
        report.ssim.push(metrics::ssim(&out.image, &vs.images[v], n, n)?);
    }
    let device = perceptual.device().clone();
    let pred = images_to_tensor(&renders.iter().map(|o| o.image.as_slice()).collect::<Vec<_>>(), n, &device)?;
    let gt = images_to_tensor(&views.iter().map(|&v| vs.images[v].as_slice()).collect::<Vec<_>>(), n, &device)?;
    report.perceptual = perceptual.distance(&pred, &gt)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let obs: Vec<ViewObservation> = renders
        .iter()
        .zip(&cams)
        .map(|(o, c)| ViewObservation { camera: c, image: &o.image, depth: &o.depth, mask: &o.alpha })
        .collect();
    report.consistency = metrics::consistency_error(&obs)?;
    Ok(report)
}
