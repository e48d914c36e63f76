use std::cell::RefCell;

use candle_core::{DType, Device, Tensor};
use gencycle::dataset::SceneData;
use gencycle::loss::scalar;
use gencycle::nn::ParamStore;
use gencycle::pipeline::*;
use gencycle::rng;
use gencycle::scheduler::{make_step_grid, NoiseSchedule, ScheduleKind};
use gencycle::Error;

const SIZE: usize = 16;

fn tiny() -> ModelConfig {
    ModelConfig { image_size: SIZE, denoiser_width: 8, recon_width: 8, diffusion_steps: 100, ..Default::default() }
}

fn samples() -> Vec<TrainSample> {
    (0..2).map(|s| TrainSample::from_scene(&SceneData::generate(50 + s, SIZE), &Device::Cpu).unwrap()).collect()
}

fn flat(store: &ParamStore) -> Vec<(String, Vec<f32>)> {
    store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(1000, 0.00085, 0.012, ScheduleKind::ScaledLinear).unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
}

#[test]
fn frozen_2d_training_leaves_the_denoiser_bit_identical() {
    let models = Models::new(&tiny(), 1, &Device::Cpu).unwrap();
    let before_d = flat(models.denoiser.store());
    let before_r = flat(models.recon.store());
    let mut tr = Trainer::new(models, TrainConfig { learning_rate: 1e-3, frozen_2d: true, ..Default::default() }).unwrap();
    let data = samples();
    for _ in 0..2 {
        tr.train_step(&data).unwrap();
    }
    assert_eq!(flat(tr.models.denoiser.store()), before_d);
    assert_ne!(flat(tr.models.recon.store()), before_r);
    assert!(tr.pretrain_step(&data).is_err());
}

#[test]
fn joint_training_updates_both_networks() {
    let models = Models::new(&tiny(), 1, &Device::Cpu).unwrap();
    let before_d = flat(models.denoiser.store());
    let mut tr = Trainer::new(models, TrainConfig { learning_rate: 1e-3, ..Default::default() }).unwrap();
    let s = tr.train_step(&samples()).unwrap();
    assert!(s.total.is_finite() && s.grad_norm > 0.0);
    assert_ne!(flat(tr.models.denoiser.store()), before_d);
}

#[test]
fn resumed_training_matches_a_continuous_run() {
    let data = samples();
    let cfg = TrainConfig { learning_rate: 1e-3, seed: 9, ..Default::default() };
    let mut continuous = Trainer::new(Models::new(&tiny(), 2, &Device::Cpu).unwrap(), cfg.clone()).unwrap();
    for _ in 0..3 {
        continuous.train_step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(Models::new(&tiny(), 2, &Device::Cpu).unwrap(), cfg.clone()).unwrap();
    first.train_step(&data).unwrap();
    first.save(dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(dir.path(), cfg, &Device::Cpu).unwrap();
    assert_eq!(resumed.steps_done(), 1);
    for _ in 0..2 {
        resumed.train_step(&data).unwrap();
    }
    assert_eq!(flat(resumed.models.denoiser.store()), flat(continuous.models.denoiser.store()));
    assert_eq!(flat(resumed.models.recon.store()), flat(continuous.models.recon.store()));
}

#[test]
fn non_finite_loss_is_reported_not_applied() {
    let models = Models::new(&tiny(), 3, &Device::Cpu).unwrap();
    let var = models.recon.store().get("head.conv.bias").unwrap().clone();
    var.set(&Tensor::full(f32::NAN, var.dims(), &Device::Cpu).unwrap()).unwrap();
    let before = flat(models.denoiser.store());
    let mut tr = Trainer::new(models, TrainConfig::default()).unwrap();
    match tr.train_step(&samples()) {
        Err(Error::NonFinite(_)) => {}
        other => panic!("expected a non-finite error, got {:?}", other.map(|s| s.total)),
    }
    assert_eq!(flat(tr.models.denoiser.store()), before);
}

/// Exact noise for a known clean target: the sampler must land on it.
fn oracle_eps(s: &NoiseSchedule, target: &Tensor, x: &Tensor, t: &[usize]) -> gencycle::Result<Tensor> {
    let rows: Vec<Tensor> = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| {
            let ab = s.alpha_bar(ti)?;
            let xi = x.get(i)?;
            if ti == 0 {
                return Ok(xi.zeros_like()?);
            }
            Ok(((xi - (target.get(i)? * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        })
        .collect::<gencycle::Result<_>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

#[test]
fn oracle_predictor_with_identity_stage_recovers_the_target() {
    let s = schedule();
    let dev = Device::Cpu;
    let target = (rng::normal_tensor(&mut rng::stream(1, "target"), &[3, 3, 8, 8], DType::F64, &dev).unwrap() * 0.5).unwrap();
    let x_t = rng::normal_tensor(&mut rng::stream(1, "noise"), &[3, 3, 8, 8], DType::F64, &dev).unwrap();
    let mut predictor = |x: &Tensor, t: &[usize]| oracle_eps(&s, &target, x, t);
    let out = cycle_sample(&s, &mut predictor, &mut IdentityStage, &x_t, None, &make_step_grid(1000, 20).unwrap(), false).unwrap();
    assert!(max_abs(&out.x0, &target) <= 1e-4);
    assert!(out.cloud.is_none());
}

struct ConstantStage(Tensor);

impl ConsistencyStage for ConstantStage {
    fn correct(&mut self, _x0_hat: &Tensor, _t: &[usize], _p: &Prediction) -> gencycle::Result<Tensor> {
        Ok(self.0.clone())
    }

    fn finalize(&mut self, _x0: &Tensor, _p: &Prediction) -> gencycle::Result<Option<Tensor>> {
        Ok(None)
    }
}

#[test]
fn single_step_returns_the_corrected_estimate() {
    let s = schedule();
    let dev = Device::Cpu;
    let x_t = rng::normal_tensor(&mut rng::stream(2, "noise"), &[2, 3, 4, 4], DType::F64, &dev).unwrap();
    let corrected = rng::normal_tensor(&mut rng::stream(2, "c"), &[2, 3, 4, 4], DType::F64, &dev).unwrap();
    let mut predictor = |x: &Tensor, _t: &[usize]| Ok(x.zeros_like()?);
    let out = cycle_sample(&s, &mut predictor, &mut ConstantStage(corrected.clone()), &x_t, None, &make_step_grid(1000, 1).unwrap(), false)
        .unwrap();
    assert!(max_abs(&out.x0, &corrected) <= 1e-12);
}

#[test]
fn reference_view_is_clean_at_every_call() {
    let s = schedule();
    let dev = Device::Cpu;
    let reference = rng::normal_tensor(&mut rng::stream(3, "ref"), &[3, 4, 4], DType::F64, &dev).unwrap();
    let x_t = rng::normal_tensor(&mut rng::stream(3, "noise"), &[3, 3, 4, 4], DType::F64, &dev).unwrap();
    let calls = RefCell::new(0);
    let mut predictor = |x: &Tensor, t: &[usize]| {
        *calls.borrow_mut() += 1;
        assert_eq!(t[0], 0);
        assert!(t[1..].iter().all(|&v| v == t[1]));
        assert_eq!(max_abs(&x.get(REFERENCE_SLOT)?, &reference), 0.0);
        Ok((x * 0.1)?)
    };
    let grid = make_step_grid(1000, 5).unwrap();
    let out = cycle_sample(&s, &mut predictor, &mut IdentityStage, &x_t, Some(&reference), &grid, true).unwrap();
    assert_eq!(*calls.borrow(), grid.len() + 1);
    assert_eq!(max_abs(&out.x0.get(REFERENCE_SLOT).unwrap(), &reference), 0.0);
    assert_eq!(out.trace.len(), grid.len());

    *calls.borrow_mut() = 0;
    let inverted = invert_prior(&s, &mut predictor, &x_t, Some(&reference), &grid, 1).unwrap();
    assert!(*calls.borrow() > 0);
    assert_eq!(inverted.dims(), x_t.dims());
}

#[test]
fn grid_must_be_strictly_decreasing() {
    let s = schedule();
    let x = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let mut predictor = |x: &Tensor, _t: &[usize]| Ok(x.zeros_like()?);
    for grid in [vec![], vec![500, 500], vec![100, 200]] {
        assert!(cycle_sample(&s, &mut predictor, &mut IdentityStage, &x, None, &grid, false).is_err());
    }
}

#[test]
fn text_sampling_produces_a_cloud() {
    let models = Models::new(&tiny(), 4, &Device::Cpu).unwrap();
    let scene = SceneData::generate(7, SIZE);
    let ts = TrainSample::from_scene(&scene, &Device::Cpu).unwrap();
    let req = SampleRequest {
        mode: Mode::TextTo3d,
        input: None,
        tokens: vec![ts.tokens.clone()],
        cameras: ts.input_cameras.clone(),
        steps: 3,
        guidance_scale: 2.0,
        inversion_refine: 0,
        use_features: true,
        seed: 5,
        keep_trace: true,
    };
    let out = sample(&models, &PriorProvider::PureNoise, &req).unwrap();
    assert_eq!(out.cloud.dims(), &[4 * (SIZE / 2) * (SIZE / 2), 14]);
    assert_eq!(out.trace.len(), 3);
    assert!(all_finite(&out.views).unwrap());
    let again = sample(&models, &PriorProvider::PureNoise, &req).unwrap();
    assert_eq!(max_abs(&out.cloud, &again.cloud), 0.0);
}
