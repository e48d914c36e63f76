//! Small conditional U-Net predicting per-view noise.
//!
//! Views share weights and are processed as the batch dimension. The only exchange
//! between views is reference injection: every self-attention layer may append the
//! keys and values of one designated view to every view's own.

use candle_core::{DType, Device, Tensor};

use crate::ftc::{FtcTensor, TensorFile};
use crate::nn::{attention, from_tokens, timestep_embedding, to_tokens, Conv2d, GroupNorm, Linear, ParamStore};
use crate::scheduler::cfg_combine;
use crate::{Error, Result};

/// Reserved token for "no conditioning".
pub const NULL_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Channel width at full resolution; the lower levels use twice this.
    pub width: usize,
    pub vocab_size: usize,
    /// Largest accepted timestep.
    pub max_timestep: usize,
}

impl DenoiserConfig {
    pub fn time_dim(&self) -> usize {
        4 * self.width
    }

    /// Channel counts of the returned feature maps, coarsest first (H/4, H/2, H).
    pub fn feature_channels(&self) -> [usize; 3] {
        [2 * self.width, 2 * self.width, self.width]
    }

    pub fn write_into(&self, file: &mut TensorFile, prefix: &str) {
        file.insert(format!("arch.{prefix}width"), FtcTensor::scalar(self.width as f32));
        file.insert(format!("arch.{prefix}vocab_size"), FtcTensor::scalar(self.vocab_size as f32));
        file.insert(format!("arch.{prefix}max_timestep"), FtcTensor::scalar(self.max_timestep as f32));
    }

    pub fn read_from(file: &TensorFile, prefix: &str) -> Result<Self> {
        Ok(Self {
            width: file.scalar(&format!("arch.{prefix}width"))? as usize,
            vocab_size: file.scalar(&format!("arch.{prefix}vocab_size"))? as usize,
            max_timestep: file.scalar(&format!("arch.{prefix}max_timestep"))? as usize,
        })
    }
}

/// Decoder activations, coarsest first: `[V, 2w, H/4, W/4]`, `[V, 2w, H/2, W/2]`, `[V, w, H, W]`.
#[derive(Debug, Clone)]
pub struct DenoiserFeatures {
    pub levels: Vec<Tensor>,
}

impl DenoiserFeatures {
    pub fn detach(&self) -> Self {
        Self { levels: self.levels.iter().map(|t| t.detach()).collect() }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self { levels: self.levels.iter().map(|t| t.zeros_like()).collect::<candle_core::Result<_>>()? })
    }
}

pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, emb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            emb: Linear::new(ps, &format!("{name}.emb"), emb_dim, c_out, true)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out { Some(Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.emb.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

struct SelfAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl SelfAttention {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c)?,
            q: Linear::new(ps, &format!("{name}.q"), c, c, false)?,
            k: Linear::new(ps, &format!("{name}.k"), c, c, false)?,
            v: Linear::new(ps, &format!("{name}.v"), c, c, false)?,
            out: Linear::new(ps, &format!("{name}.out"), c, c, true)?,
        })
    }

    fn forward(&self, x: &Tensor, reference: Option<usize>) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let tokens = to_tokens(&self.norm.forward(x)?)?;
        let q = self.q.forward(&tokens)?;
        let mut k = self.k.forward(&tokens)?;
        let mut v = self.v.forward(&tokens)?;
        if let Some(r) = reference {
            let kr = k.narrow(0, r, 1)?.broadcast_as(k.shape())?;
            let vr = v.narrow(0, r, 1)?.broadcast_as(v.shape())?;
            k = Tensor::cat(&[&k, &kr], 1)?;
            v = Tensor::cat(&[&v, &vr], 1)?;
        }
        let o = self.out.forward(&attention(&q, &k, &v)?)?;
        debug_assert_eq!(o.dim(0)?, n);
        Ok((x + from_tokens(&o, h, w)?)?)
    }
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    tokens: Tensor,
    conv_in: Conv2d,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    enc1_attn: SelfAttention,
    down1: Conv2d,
    mid1: ResBlock,
    mid_attn: SelfAttention,
    mid2: ResBlock,
    dec2: ResBlock,
    dec2_attn: SelfAttention,
    up2: Conv2d,
    dec1: ResBlock,
    dec1_attn: SelfAttention,
    up1: Conv2d,
    dec0: ResBlock,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

/// One denoiser query: `x` is `[V, 3, H, W]`, `t` and `tokens` hold one entry per view
/// (or one entry shared by all views).
pub struct DenoiserInput<'a> {
    pub x: &'a Tensor,
    pub t: &'a [usize],
    pub tokens: &'a [Vec<u32>],
    /// View whose keys/values are appended in every self-attention layer.
    pub reference: Option<usize>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64, device: &Device) -> Result<Self> {
        if cfg.width == 0 || cfg.vocab_size == 0 {
            return Err(Error::InvalidArgument("denoiser width and vocabulary must be positive".into()));
        }
        let mut store = ParamStore::new(seed, device);
        let (b, b2, td) = (cfg.width, 2 * cfg.width, cfg.time_dim());
        let ps = &mut store;
        let time1 = Linear::new(ps, "time.1", b, td, true)?;
        let time2 = Linear::new(ps, "time.2", td, td, true)?;
        let tokens = ps.normal("tokens", &[cfg.vocab_size, td], 0.5)?;
        let conv_in = Conv2d::new(ps, "conv_in", 3, b, 3, 1)?;
        let enc0 = ResBlock::new(ps, "enc0", b, b, td)?;
        let down0 = Conv2d::new(ps, "down0", b, b, 3, 2)?;
        let enc1 = ResBlock::new(ps, "enc1", b, b2, td)?;
        let enc1_attn = SelfAttention::new(ps, "enc1.attn", b2)?;
        let down1 = Conv2d::new(ps, "down1", b2, b2, 3, 2)?;
        let mid1 = ResBlock::new(ps, "mid1", b2, b2, td)?;
        let mid_attn = SelfAttention::new(ps, "mid.attn", b2)?;
        let mid2 = ResBlock::new(ps, "mid2", b2, b2, td)?;
        let dec2 = ResBlock::new(ps, "dec2", 2 * b2, b2, td)?;
        let dec2_attn = SelfAttention::new(ps, "dec2.attn", b2)?;
        let up2 = Conv2d::new(ps, "up2", b2, b2, 3, 1)?;
        let dec1 = ResBlock::new(ps, "dec1", 2 * b2, b2, td)?;
        let dec1_attn = SelfAttention::new(ps, "dec1.attn", b2)?;
        let up1 = Conv2d::new(ps, "up1", b2, b2, 3, 1)?;
        let dec0 = ResBlock::new(ps, "dec0", b2 + b, b, td)?;
        let out_norm = GroupNorm::new(ps, "out.norm", b)?;
        let conv_out = Conv2d::with_std(ps, "out.conv", b, 3, 3, 1, 0.1 / ((9 * b) as f64).sqrt())?;
        Ok(Self {
            cfg,
            store,
            time1,
            time2,
            tokens,
            conv_in,
            enc0,
            down0,
            enc1,
            enc1_attn,
            down1,
            mid1,
            mid_attn,
            mid2,
            dec2,
            dec2_attn,
            up2,
            dec1,
            dec1_attn,
            up1,
            dec0,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Sinusoidal embedding followed by the learned projection, `[V, time_dim]`.
    pub fn per_view_time_embed(&self, t: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = t.iter().find(|&&t| t > self.cfg.max_timestep) {
            return Err(Error::TimestepOutOfRange { t: bad, max: self.cfg.max_timestep });
        }
        let e = timestep_embedding(t, self.cfg.width, self.store.device())?;
        Ok(self.time2.forward(&self.time1.forward(&e)?.silu()?)?)
    }

    /// Mean of the token embeddings, `[time_dim]`. An empty list means [`NULL_TOKEN`].
    pub fn embed_conditioning(&self, tokens: &[u32]) -> Result<Tensor> {
        let ids: Vec<u32> = if tokens.is_empty() { vec![NULL_TOKEN] } else { tokens.to_vec() };
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::UnknownToken(bad.to_string()));
        }
        let idx = Tensor::new(ids.as_slice(), self.store.device())?;
        Ok(self.tokens.index_select(&idx, 0)?.mean(0)?)
    }

    fn expand<T: Clone>(items: &[T], v: usize, what: &str) -> Result<Vec<T>> {
        match items.len() {
            1 => Ok(vec![items[0].clone(); v]),
            n if n == v => Ok(items.to_vec()),
            n => Err(Error::Shape(format!("{n} {what} for {v} views"))),
        }
    }

    /// One forward pass. Returns `ε̂` and the decoder features.
    pub fn forward(&self, input: &DenoiserInput) -> Result<(Tensor, DenoiserFeatures)> {
        let (v, c, h, w) = input.x.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("denoiser expects [V, 3, H, W] with H, W divisible by 4, got {:?}", input.x.dims())));
        }
        if let Some(r) = input.reference {
            if r >= v {
                return Err(Error::InvalidArgument(format!("reference view {r} out of {v}")));
            }
        }
        let t = Self::expand(input.t, v, "timesteps")?;
        let tokens = Self::expand(input.tokens, v, "token lists")?;
        let cond = tokens.iter().map(|tk| self.embed_conditioning(tk)).collect::<Result<Vec<_>>>()?;
        let emb = (self.per_view_time_embed(&t)? + Tensor::stack(&cond, 0)?)?;
        let x = input.x.to_dtype(DType::F32)?;
        let r = input.reference;

        let h0 = self.enc0.forward(&self.conv_in.forward(&x)?, &emb)?;
        let h1 = self.enc1_attn.forward(&self.enc1.forward(&self.down0.forward(&h0)?, &emb)?, r)?;
        let h2 = self.down1.forward(&h1)?;
        let m = self.mid2.forward(&self.mid_attn.forward(&self.mid1.forward(&h2, &emb)?, r)?, &emb)?;
        let d2 = self.dec2_attn.forward(&self.dec2.forward(&Tensor::cat(&[&m, &h2], 1)?, &emb)?, r)?;
        let u2 = self.up2.forward(&d2.upsample_nearest2d(h / 2, w / 2)?)?;
        let d1 = self.dec1_attn.forward(&self.dec1.forward(&Tensor::cat(&[&u2, &h1], 1)?, &emb)?, r)?;
        let u1 = self.up1.forward(&d1.upsample_nearest2d(h, w)?)?;
        let d0 = self.dec0.forward(&Tensor::cat(&[&u1, &h0], 1)?, &emb)?;
        let eps = self.conv_out.forward(&self.out_norm.forward(&d0)?.silu()?)?;
        Ok((eps.to_dtype(input.x.dtype())?, DenoiserFeatures { levels: vec![d2, d1, d0] }))
    }

    /// Noise prediction with classifier-free guidance. `guidance_scale = 1` is a single
    /// conditional pass; otherwise a second pass with [`NULL_TOKEN`] everywhere is combined
    /// with it. Features always come from the conditional pass.
    pub fn predict_noise(&self, input: &DenoiserInput, guidance_scale: f64) -> Result<(Tensor, DenoiserFeatures)> {
        let (eps_c, feats) = self.forward(input)?;
        if guidance_scale == 1.0 {
            return Ok((eps_c, feats));
        }
        let null = [vec![NULL_TOKEN]];
        let uncond = DenoiserInput { x: input.x, t: input.t, tokens: &null, reference: input.reference };
        let (eps_u, _) = self.forward(&uncond)?;
        Ok((cfg_combine(&eps_u, &eps_c, guidance_scale)?, feats))
    }

    pub fn save_into(&self, file: &mut TensorFile, prefix: &str) -> Result<()> {
        self.cfg.write_into(file, prefix);
        self.store.write_into(file, prefix)
    }

    /// Builds a denoiser from the architecture recorded in `file` and loads its weights.
    pub fn load_from(file: &TensorFile, prefix: &str, device: &Device) -> Result<Self> {
        let cfg = DenoiserConfig::read_from(file, prefix)?;
        let model = Self::new(cfg, 0, device)?;
        model.store.read_from(file, prefix)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model() -> Denoiser {
        Denoiser::new(DenoiserConfig { width: 8, vocab_size: 10, max_timestep: 1000 }, 1, &Device::Cpu).unwrap()
    }

    fn views(seed: u64) -> Tensor {
        rng::normal_tensor(&mut rng::stream(seed, "x"), &[3, 3, 8, 8], DType::F32, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn shapes() {
        let m = model();
        let x = views(0);
        let (eps, f) = m.forward(&DenoiserInput { x: &x, t: &[10, 20, 30], tokens: &[vec![1, 7]], reference: None }).unwrap();
        assert_eq!(eps.dims(), &[3, 3, 8, 8]);
        assert_eq!(f.levels[0].dims(), &[3, 16, 2, 2]);
        assert_eq!(f.levels[1].dims(), &[3, 16, 4, 4]);
        assert_eq!(f.levels[2].dims(), &[3, 8, 8, 8]);
        assert_eq!(m.per_view_time_embed(&[0, 5]).unwrap().dims(), &[2, 32]);
    }

    #[test]
    fn time_and_token_embeddings() {
        let m = model();
        let e = m.per_view_time_embed(&[0, 500, 500]).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(e[0], e[1]);
        assert_eq!(e[1], e[2]);
        assert!(m.per_view_time_embed(&[1001]).is_err());
        assert_eq!(vals(&m.embed_conditioning(&[]).unwrap()), vals(&m.embed_conditioning(&[NULL_TOKEN]).unwrap()));
        assert!(matches!(m.embed_conditioning(&[10]), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn views_are_independent_without_injection() {
        let m = model();
        let x = views(0);
        let (a, _) = m.forward(&DenoiserInput { x: &x, t: &[100], tokens: &[vec![2]], reference: None }).unwrap();
        let bumped = x.slice_assign(&[2..3, 0..3, 0..8, 0..8], &(x.narrow(0, 2, 1).unwrap() + 1.0).unwrap()).unwrap();
        let (b, _) = m.forward(&DenoiserInput { x: &bumped, t: &[100, 100, 900], tokens: &[vec![2]], reference: None }).unwrap();
        assert_eq!(vals(&a.narrow(0, 0, 2).unwrap()), vals(&b.narrow(0, 0, 2).unwrap()));
        assert_ne!(vals(&a.narrow(0, 2, 1).unwrap()), vals(&b.narrow(0, 2, 1).unwrap()));
    }

    #[test]
    fn reference_is_isolated_and_shared() {
        let m = model();
        let x = views(0);
        let inp = |x: &Tensor| -> Tensor {
            m.forward(&DenoiserInput { x, t: &[0, 300, 300], tokens: &[vec![3]], reference: Some(0) }).unwrap().0
        };
        let a = inp(&x);
        let bumped = x.slice_assign(&[1..2, 0..3, 0..8, 0..8], &(x.narrow(0, 1, 1).unwrap() * 2.0).unwrap()).unwrap();
        let b = inp(&bumped);
        assert_eq!(vals(&a.narrow(0, 0, 1).unwrap()), vals(&b.narrow(0, 0, 1).unwrap()));
        // The reference now influences other views.
        let moved = x.slice_assign(&[0..1, 0..3, 0..8, 0..8], &(x.narrow(0, 0, 1).unwrap() * 2.0).unwrap()).unwrap();
        let c = inp(&moved);
        assert_ne!(vals(&a.narrow(0, 2, 1).unwrap()), vals(&c.narrow(0, 2, 1).unwrap()));
    }

    #[test]
    fn identical_views_give_identical_outputs_with_injection() {
        let m = model();
        let one = views(4).narrow(0, 0, 1).unwrap();
        let x = Tensor::cat(&[&one, &one, &one], 0).unwrap();
        let (eps, _) = m.forward(&DenoiserInput { x: &x, t: &[200], tokens: &[vec![1]], reference: Some(0) }).unwrap();
        let a = vals(&eps.narrow(0, 0, 1).unwrap());
        for v in 1..3 {
            let b = vals(&eps.narrow(0, v, 1).unwrap());
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-5));
        }
    }

    #[test]
    fn unit_guidance_is_one_pass() {
        let m = model();
        let x = views(1);
        let inp = DenoiserInput { x: &x, t: &[50], tokens: &[vec![4]], reference: Some(0) };
        assert_eq!(vals(&m.predict_noise(&inp, 1.0).unwrap().0), vals(&m.forward(&inp).unwrap().0));
        assert_ne!(vals(&m.predict_noise(&inp, 3.0).unwrap().0), vals(&m.forward(&inp).unwrap().0));
    }

    #[test]
    fn checkpoint_restores_outputs() {
        let m = model();
        let mut file = TensorFile::new();
        m.save_into(&mut file, "denoiser.").unwrap();
        let bytes = file.to_bytes();
        let n = Denoiser::load_from(&TensorFile::from_bytes(&bytes).unwrap(), "denoiser.", &Device::Cpu).unwrap();
        let x = views(2);
        let inp = DenoiserInput { x: &x, t: &[7], tokens: &[vec![]], reference: None };
        assert_eq!(vals(&m.forward(&inp).unwrap().0), vals(&n.forward(&inp).unwrap().0));
    }
}
