//! Feed-forward reconstruction of pixel-aligned Gaussians from a few posed views.
//!
//! Input is RGB plus a 6-channel Plücker ray map per view. The encoder goes down to
//! H/4, where tokens of all views attend to each other; the decoder only comes back to
//! H/2, so each view contributes `(H/2)(W/2)` Gaussians. Timestep projections in every
//! residual block and cross-attention to denoiser features start at exactly zero.

use candle_core::{DType, Device, Tensor};
use gencycle_render::{CameraPose, PACKED_STRIDE};

use crate::denoiser::DenoiserFeatures;
use crate::ftc::{FtcTensor, TensorFile};
use crate::nn::{attention, from_tokens, to_tokens, Conv2d, GroupNorm, Linear, ParamStore};
use crate::{Error, Result};

/// Ray depth range of the predicted Gaussians.
pub const DEPTH_RANGE: (f64, f64) = (0.5, 2.5);
pub const OFFSET_BOUND: f64 = 0.1;
pub const SCALE_RANGE: (f64, f64) = (0.005, 0.08);
/// Raw head channels per pixel: depth, offset 3, scale 3, rotation 4, opacity, color 3.
pub const HEAD_CHANNELS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconConfig {
    pub width: usize,
    /// Width of the timestep embedding supplied by the denoiser.
    pub time_dim: usize,
    /// Denoiser feature channels at H/4 and H/2.
    pub feature_channels: [usize; 2],
}

impl ReconConfig {
    pub fn write_into(&self, file: &mut TensorFile, prefix: &str) {
        file.insert(format!("arch.{prefix}width"), FtcTensor::scalar(self.width as f32));
        file.insert(format!("arch.{prefix}time_dim"), FtcTensor::scalar(self.time_dim as f32));
        file.insert(format!("arch.{prefix}feature_h4"), FtcTensor::scalar(self.feature_channels[0] as f32));
        file.insert(format!("arch.{prefix}feature_h2"), FtcTensor::scalar(self.feature_channels[1] as f32));
    }

    pub fn read_from(file: &TensorFile, prefix: &str) -> Result<Self> {
        Ok(Self {
            width: file.scalar(&format!("arch.{prefix}width"))? as usize,
            time_dim: file.scalar(&format!("arch.{prefix}time_dim"))? as usize,
            feature_channels: [
                file.scalar(&format!("arch.{prefix}feature_h4"))? as usize,
                file.scalar(&format!("arch.{prefix}feature_h2"))? as usize,
            ],
        })
    }
}

/// Per-pixel Plücker coordinates `(d, o × d)` as `[V, 6, H, W]` for pixel centers.
pub fn plucker_rays(cameras: &[CameraPose], height: usize, width: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(cameras.len() * 6 * height * width);
    for cam in cameras {
        if cam.width != width || cam.height != height {
            return Err(Error::Shape(format!(
                "camera is {}x{}, views are {width}x{height}",
                cam.width, cam.height
            )));
        }
        let mut planes = vec![0f32; 6 * height * width];
        for row in 0..height {
            for col in 0..width {
                let (o, d) = cam.ray(col as f64 + 0.5, row as f64 + 0.5);
                let m = o.cross(&d);
                let p = row * width + col;
                for k in 0..3 {
                    planes[k * height * width + p] = d[k] as f32;
                    planes[(3 + k) * height * width + p] = m[k] as f32;
                }
            }
        }
        data.extend(planes);
    }
    Ok(Tensor::from_vec(data, (cameras.len(), 6, height, width), device)?)
}

/// Origins and unit directions `[N, 3]` of the rays through the centers of the
/// `stride x stride` pixel blocks, view-major then row-major.
pub fn block_rays(cameras: &[CameraPose], stride: usize, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut origins = Vec::new();
    let mut dirs = Vec::new();
    for cam in cameras {
        for row in 0..cam.height / stride {
            for col in 0..cam.width / stride {
                let c = stride as f64 / 2.0;
                let (o, d) = cam.ray((col * stride) as f64 + c, (row * stride) as f64 + c);
                origins.extend(o.iter().map(|&v| v as f32));
                dirs.extend(d.iter().map(|&v| v as f32));
            }
        }
    }
    let n = origins.len() / 3;
    Ok((Tensor::from_vec(origins, (n, 3), device)?, Tensor::from_vec(dirs, (n, 3), device)?))
}

/// Maps raw head outputs `[N, 15]` to packed Gaussians `[N, 14]` on the given rays.
pub fn activate_gaussians(raw: &Tensor, origins: &Tensor, dirs: &Tensor) -> Result<Tensor> {
    let (n, c) = raw.dims2()?;
    if c != HEAD_CHANNELS || origins.dims() != [n, 3] || dirs.dims() != [n, 3] {
        return Err(Error::Shape(format!("raw {:?}, origins {:?}, dirs {:?}", raw.dims(), origins.dims(), dirs.dims())));
    }
    let sig = |t: Tensor| candle_nn::ops::sigmoid(&t);
    let (near, far) = DEPTH_RANGE;
    let depth = (sig(raw.narrow(1, 0, 1)?)? * (far - near))? + near;
    let offset = (raw.narrow(1, 1, 3)?.tanh()? * OFFSET_BOUND)?;
    let position = (origins + dirs.broadcast_mul(&depth?)?)? + offset;
    let (s_min, s_max) = SCALE_RANGE;
    let scale = ((sig(raw.narrow(1, 4, 3)?)? * (s_max - s_min))? + s_min)?;
    let identity = Tensor::new(&[[1f32, 0.0, 0.0, 0.0]], raw.device())?.to_dtype(raw.dtype())?;
    let q = raw.narrow(1, 7, 4)?.broadcast_add(&identity)?;
    let q = q.broadcast_div(&(q.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?)?;
    let opacity = sig(raw.narrow(1, 11, 1)?)?;
    let color = sig(raw.narrow(1, 12, 3)?)?;
    let packed = Tensor::cat(&[&position?, &scale, &q, &opacity, &color], 1)?;
    debug_assert_eq!(packed.dim(1)?, PACKED_STRIDE);
    Ok(packed)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            time: Linear::zeros(ps, &format!("{name}.time"), time_dim, c_out)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out { Some(Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = time_condition(&h, &self.time, t_emb)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// `features + proj(t_emb)` broadcast over space.
fn time_condition(features: &Tensor, proj: &Linear, t_emb: &Tensor) -> Result<Tensor> {
    let e = proj.forward(t_emb)?.unsqueeze(2)?.unsqueeze(3)?;
    Ok(features.broadcast_add(&e)?)
}

/// Cross-attention from reconstructor features to denoiser features of the same view,
/// scaled by a learned scalar gate that starts at zero.
struct FeatureInteraction {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    gate: Tensor,
}

impl FeatureInteraction {
    fn new(ps: &mut ParamStore, name: &str, c: usize, c_feat: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c)?,
            q: Linear::new(ps, &format!("{name}.q"), c, c, false)?,
            k: Linear::new(ps, &format!("{name}.k"), c_feat, c, false)?,
            v: Linear::new(ps, &format!("{name}.v"), c_feat, c, false)?,
            out: Linear::new(ps, &format!("{name}.out"), c, c, false)?,
            gate: ps.constant(&format!("{name}.gate"), &[1], 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor, feats: &Tensor) -> Result<Tensor> {
        let (v, _, h, w) = x.dims4()?;
        if feats.dim(0)? != v {
            return Err(Error::Shape(format!("{} feature maps for {v} views", feats.dim(0)?)));
        }
        let q = self.q.forward(&to_tokens(&self.norm.forward(x)?)?)?;
        let f = to_tokens(&feats.to_dtype(x.dtype())?)?;
        let o = self.out.forward(&attention(&q, &self.k.forward(&f)?, &self.v.forward(&f)?)?)?;
        Ok((x + from_tokens(&o, h, w)?.broadcast_mul(&self.gate)?)?)
    }
}

pub struct Reconstructor {
    cfg: ReconConfig,
    store: ParamStore,
    conv_in: Conv2d,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    interact_h2: FeatureInteraction,
    down1: Conv2d,
    enc2: ResBlock,
    interact_h4: FeatureInteraction,
    mv_norm: GroupNorm,
    mv_q: Linear,
    mv_k: Linear,
    mv_v: Linear,
    mv_out: Linear,
    up: Conv2d,
    dec1: ResBlock,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Reconstructor {
    pub fn new(cfg: ReconConfig, seed: u64, device: &Device) -> Result<Self> {
        if cfg.width == 0 || cfg.time_dim == 0 {
            return Err(Error::InvalidArgument("reconstructor width and time_dim must be positive".into()));
        }
        let mut store = ParamStore::new(seed, device);
        let ps = &mut store;
        let (r, r2, td) = (cfg.width, 2 * cfg.width, cfg.time_dim);
        let conv_in = Conv2d::new(ps, "conv_in", 9, r, 3, 1)?;
        let enc0 = ResBlock::new(ps, "enc0", r, r, td)?;
        let down0 = Conv2d::new(ps, "down0", r, r, 3, 2)?;
        let enc1 = ResBlock::new(ps, "enc1", r, r2, td)?;
        let interact_h2 = FeatureInteraction::new(ps, "interact_h2", r2, cfg.feature_channels[1])?;
        let down1 = Conv2d::new(ps, "down1", r2, r2, 3, 2)?;
        let enc2 = ResBlock::new(ps, "enc2", r2, r2, td)?;
        let interact_h4 = FeatureInteraction::new(ps, "interact_h4", r2, cfg.feature_channels[0])?;
        let mv_norm = GroupNorm::new(ps, "mv.norm", r2)?;
        let mv_q = Linear::new(ps, "mv.q", r2, r2, false)?;
        let mv_k = Linear::new(ps, "mv.k", r2, r2, false)?;
        let mv_v = Linear::new(ps, "mv.v", r2, r2, false)?;
        let mv_out = Linear::new(ps, "mv.out", r2, r2, true)?;
        let up = Conv2d::new(ps, "up", r2, r2, 3, 1)?;
        let dec1 = ResBlock::new(ps, "dec1", 2 * r2, r2, td)?;
        let head_norm = GroupNorm::new(ps, "head.norm", r2)?;
        let head = Conv2d::with_std(ps, "head.conv", r2, HEAD_CHANNELS, 3, 1, 0.1 / ((9 * r2) as f64).sqrt())?;
        Ok(Self {
            cfg,
            store,
            conv_in,
            enc0,
            down0,
            enc1,
            interact_h2,
            down1,
            enc2,
            interact_h4,
            mv_norm,
            mv_q,
            mv_k,
            mv_v,
            mv_out,
            up,
            dec1,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Stops training of the feature-interaction gates (they stay at their current value).
    pub fn freeze_interaction_gates(&mut self) {
        self.store.set_trainable("interact_h2.gate", false);
        self.store.set_trainable("interact_h4.gate", false);
    }

    pub fn interaction_gates(&self) -> Result<[f32; 2]> {
        Ok([
            self.interact_h2.gate.to_vec1::<f32>()?[0],
            self.interact_h4.gate.to_vec1::<f32>()?[0],
        ])
    }

    /// Gaussians `[V (H/2) (W/2), 14]` from views `[V, 3, H, W]` in `[0, 1]`.
    /// `t_emb` is the denoiser's per-view timestep embedding `[V, time_dim]`.
    pub fn reconstruct(
        &self,
        views: &Tensor,
        cameras: &[CameraPose],
        t_emb: &Tensor,
        features: Option<&DenoiserFeatures>,
    ) -> Result<Tensor> {
        let (v, c, h, w) = views.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("views must be [V, 3, H, W] with H, W divisible by 4, got {:?}", views.dims())));
        }
        if cameras.len() != v {
            return Err(Error::Shape(format!("{} cameras for {v} views", cameras.len())));
        }
        if t_emb.dims() != [v, self.cfg.time_dim] {
            return Err(Error::Shape(format!("time embedding {:?}, expected [{v}, {}]", t_emb.dims(), self.cfg.time_dim)));
        }
        let device = self.store.device();
        let views = views.to_dtype(DType::F32)?;
        let t_emb = t_emb.to_dtype(DType::F32)?;
        let rays = plucker_rays(cameras, h, w, device)?;
        let x = Tensor::cat(&[&views, &rays], 1)?;

        let h0 = self.enc0.forward(&self.conv_in.forward(&x)?, &t_emb)?;
        let mut h1 = self.enc1.forward(&self.down0.forward(&h0)?, &t_emb)?;
        let mut h2 = self.enc2.forward(&self.down1.forward(&h1)?, &t_emb)?;
        if let Some(f) = features {
            let [f4, f2] = match f.levels.as_slice() {
                [a, b, ..] => [a, b],
                _ => return Err(Error::Shape("denoiser features need the H/4 and H/2 levels".into())),
            };
            if f4.dims()[2..] != h2.dims()[2..] || f2.dims()[2..] != h1.dims()[2..] {
                return Err(Error::Shape(format!(
                    "feature resolutions {:?}/{:?} do not match {:?}/{:?}",
                    f4.dims(),
                    f2.dims(),
                    h2.dims(),
                    h1.dims()
                )));
            }
            h1 = self.interact_h2.forward(&h1, f2)?;
            h2 = self.interact_h4.forward(&h2, f4)?;
        }
        let h2 = self.multiview_attention(&h2)?;
        let u = self.up.forward(&h2.upsample_nearest2d(h / 2, w / 2)?)?;
        let d = self.dec1.forward(&Tensor::cat(&[&u, &h1], 1)?, &t_emb)?;
        let raw = self.head.forward(&self.head_norm.forward(&d)?.silu()?)?;
        let raw = raw.permute((0, 2, 3, 1))?.reshape((v * (h / 2) * (w / 2), HEAD_CHANNELS))?;
        let (origins, dirs) = block_rays(cameras, 2, device)?;
        activate_gaussians(&raw, &origins, &dirs)
    }

    /// Self-attention over the tokens of all views jointly.
    fn multiview_attention(&self, x: &Tensor) -> Result<Tensor> {
        let (v, c, h, w) = x.dims4()?;
        let tokens = to_tokens(&self.mv_norm.forward(x)?)?.reshape((1, v * h * w, c))?;
        let o = attention(&self.mv_q.forward(&tokens)?, &self.mv_k.forward(&tokens)?, &self.mv_v.forward(&tokens)?)?;
        let o = self.mv_out.forward(&o)?.reshape((v, h * w, c))?;
        Ok((x + from_tokens(&o, h, w)?)?)
    }

    pub fn save_into(&self, file: &mut TensorFile, prefix: &str) -> Result<()> {
        self.cfg.write_into(file, prefix);
        self.store.write_into(file, prefix)
    }

    pub fn load_from(file: &TensorFile, prefix: &str, device: &Device) -> Result<Self> {
        let cfg = ReconConfig::read_from(file, prefix)?;
        let model = Self::new(cfg, 0, device)?;
        model.store.read_from(file, prefix)?;
        Ok(model)
    }
}
