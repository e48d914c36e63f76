//! Parameter storage, the handful of layers the networks need, AdamW and gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::ftc::{FtcTensor, TensorFile};
use crate::{rng, Error, Result};

pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Named parameters created in a fixed order from a seeded stream.
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: device.clone() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.push(Param { name: name.to_string(), var, trainable: true });
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = rng::normal_vec(&mut self.rng, n).into_iter().map(|v| (v * std) as f32).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.push(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.push(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.push(name, t)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.var)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn write_into(&self, file: &mut TensorFile, prefix: &str) -> Result<()> {
        for p in &self.params {
            file.insert(format!("{prefix}{}", p.name), FtcTensor::from_tensor(p.var.as_tensor())?);
        }
        Ok(())
    }

    /// Overwrites every parameter from `file`; names and shapes must match exactly.
    pub fn read_from(&self, file: &TensorFile, prefix: &str) -> Result<()> {
        for p in &self.params {
            let key = format!("{prefix}{}", p.name);
            let t = file.get(&key).ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter `{key}`")))?;
            if t.dims != p.var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{key}` has shape {:?}, model expects {:?}",
                    t.dims,
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_tensor(&self.device)?)?;
        }
        Ok(())
    }
}

pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = ps.uniform(&format!("{name}.weight"), &[d_out, d_in], 1.0 / (d_in as f64).sqrt())?;
        let b = if bias { Some(ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?) } else { None };
        Ok(Self { w, b })
    }

    /// Weight and bias start at exactly zero.
    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = ps.constant(&format!("{name}.weight"), &[d_out, d_in], 0.0)?;
        let b = ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { w, b: Some(b) })
    }

    /// Applies to the last dimension of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.w.t()?)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        Self::with_std(ps, name, c_in, c_out, k, stride, 1.0 / fan_in.sqrt())
    }

    pub fn with_std(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        std: f64,
    ) -> Result<Self> {
        let w = ps.normal(&format!("{name}.weight"), &[c_out, c_in, k, k], std)?;
        let b = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self { w, b, stride, padding: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.b.reshape((1, (), 1, 1))?)?)
    }
}

pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let groups = [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap();
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Softmax attention `softmax(q kᵀ / √d) v` over `[B, Lq, d]` queries and `[B, Lk, d]` keys/values.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)? as f64;
    let scores = (q.matmul(&k.t()?)? / d.sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(weights.matmul(v)?)
}

/// `[B, C, H, W] -> [B, H*W, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H*W, C] -> [B, C, H, W]`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Sinusoidal embedding of integer timesteps, `[len(t), dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).cos() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).sin() as f32);
        }
        data.extend(std::iter::repeat(0.0).take(dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?)
}

/// Decoupled-weight-decay Adam over the trainable parameters of one or more stores.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: Vec<(String, Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, state: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter in `params` that has a gradient.
    /// `key` prefixes state entries so several stores can share one optimizer.
    pub fn step(&mut self, params: &[(&str, &ParamStore)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (key, store) in params {
            for p in store.trainable() {
                let Some(g) = grads.get(p.var.as_tensor()) else { continue };
                let name = format!("{key}{}", p.name);
                let idx = match self.state.iter().position(|(n, _, _)| *n == name) {
                    Some(i) => i,
                    None => {
                        let z = p.var.zeros_like()?;
                        self.state.push((name, z.clone(), z));
                        self.state.len() - 1
                    }
                };
                // Gradients carry the autograd graph; stored moments must not.
                let g = g.detach();
                let (_, m, v) = &mut self.state[idx];
                *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
                *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
                let m_hat = (&*m / bc1)?;
                let v_hat = (&*v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
                let decayed = (p.var.as_tensor().detach() * (1.0 - self.lr * self.weight_decay))?;
                p.var.set(&(decayed - (update * self.lr)?)?)?;
            }
        }
        Ok(())
    }

    pub fn write_into(&self, file: &mut TensorFile) -> Result<()> {
        file.insert("optim.step", FtcTensor::scalar(self.step as f32));
        for (name, m, v) in &self.state {
            file.insert(format!("optim.m.{name}"), FtcTensor::from_tensor(m)?);
            file.insert(format!("optim.v.{name}"), FtcTensor::from_tensor(v)?);
        }
        Ok(())
    }

    pub fn read_from(&mut self, file: &TensorFile, device: &Device) -> Result<()> {
        self.step = file.scalar("optim.step")? as u64;
        self.state.clear();
        for (name, t) in file.entries() {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                let v = file.require(&format!("optim.v.{rest}"))?;
                self.state.push((rest.to_string(), t.to_tensor(device)?, v.to_tensor(device)?));
            }
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of all trainable parameters.
pub fn grad_norm(params: &[&ParamStore], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0f64;
    for store in params {
        for p in store.trainable() {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
    }
    Ok(sq.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(params: &[&ParamStore], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(params, grads)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for store in params {
            for p in store.trainable() {
                if let Some(g) = grads.remove(p.var.as_tensor()) {
                    grads.insert(p.var.as_tensor(), (g.detach() * scale)?);
                }
            }
        }
    }
    Ok(norm)
}
