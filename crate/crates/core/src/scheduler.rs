//! Diffusion-time mathematics: noise schedule, forward noising, one-shot clean
//! estimates, the cycle backward step, DDIM stepping/inversion and guidance.
//!
//! Timestep `0` means "clean": `ᾱ₀ = 1`. Image arguments are `V x C x H x W`
//! tensors and timesteps are given per view (a single entry broadcasts).

use candle_core::Tensor;

use crate::{Error, Result};

/// Lower clamp on `ᾱ` before dividing by `√ᾱ`.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    /// Betas interpolated linearly in square-root space.
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled_linear" => Ok(Self::ScaledLinear),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Index `t` holds `ᾱₜ`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(num_steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let frac = |i: usize| if num_steps == 1 { 0.0 } else { i as f64 / (num_steps - 1) as f64 };
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| match kind {
                ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
                ScheduleKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    (a + (b - a) * frac(i)).powi(2)
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Schedule from explicit `β₁..β_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// `T`, the largest timestep.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.num_steps() });
        }
        Ok(())
    }

    /// `ᾱₜ` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `αₜ` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, max: self.num_steps() });
        }
        self.check(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `βₜ` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.alpha(t)?)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Per-view coefficient tensor of shape `[V, 1, 1, 1]`, or a broadcast scalar.
    fn per_view(&self, x: &Tensor, t: &[usize], f: impl Fn(usize) -> Result<f64>) -> Result<Tensor> {
        let v = x.dim(0)?;
        let coeffs: Vec<f64> = match t.len() {
            1 => vec![f(t[0])?; v],
            n if n == v => t.iter().map(|&t| f(t)).collect::<Result<_>>()?,
            n => return Err(Error::Shape(format!("{n} timesteps for {v} views"))),
        };
        let mut shape = vec![v];
        shape.extend(std::iter::repeat(1).take(x.rank() - 1));
        Ok(Tensor::from_vec(coeffs, shape, x.device())?.to_dtype(x.dtype())?)
    }

    fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        Ok(())
    }

    /// `√ᾱₜ x₀ + √(1-ᾱₜ) ε`.
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        Self::same_shape(x0, eps)?;
        let a = self.per_view(x0, t, |t| Ok(self.alpha_bar(t)?.sqrt()))?;
        let b = self.per_view(x0, t, |t| Ok((1.0 - self.alpha_bar(t)?).sqrt()))?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
    }

    /// One-shot clean estimate `(xₜ - √(1-ᾱₜ) ε̂) / √ᾱₜ`.
    pub fn estimate_x0(&self, x_t: &Tensor, eps_pred: &Tensor, t: &[usize]) -> Result<Tensor> {
        Self::same_shape(x_t, eps_pred)?;
        let b = self.per_view(x_t, t, |t| Ok((1.0 - self.alpha_bar(t)?).sqrt()))?;
        let inv = self.per_view(x_t, t, |t| Ok(1.0 / self.alpha_bar(t)?.max(ALPHA_BAR_FLOOR).sqrt()))?;
        Ok((x_t - eps_pred.broadcast_mul(&b)?)?.broadcast_mul(&inv)?)
    }

    /// Coefficients `(c_x0, c_xt)` of the resampling step from `t` to `t_prev`:
    /// `x_prev = c_x0 x̂₀' + c_xt xₜ`. For `t_prev = t - 1` this is
    /// `(√ᾱ_{t-1} βₜ / (1-ᾱₜ), √αₜ (1-ᾱ_{t-1}) / (1-ᾱₜ))`; larger jumps use the
    /// same posterior-mean form with `αₜ` replaced by `ᾱₜ/ᾱ_{t_prev}`.
    pub fn cycle_coefficients(&self, t: usize, t_prev: usize) -> Result<(f64, f64)> {
        if t == 0 || t_prev >= t {
            return Err(Error::InvalidArgument(format!("need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")));
        }
        let ab_t = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        Ok(cycle_coefficients(ab_t / ab_prev, ab_prev))
    }

    /// Resampling step `t -> t-1` driven by the re-rendered clean estimate `x̂₀'`.
    pub fn cycle_backward_step(&self, x_t: &Tensor, x0_rendered: &Tensor, t: usize) -> Result<Tensor> {
        self.cycle_backward_step_to(x_t, x0_rendered, t, t.wrapping_sub(1))
    }

    /// Resampling step over an arbitrary jump `t -> t_prev` of a respaced grid.
    pub fn cycle_backward_step_to(&self, x_t: &Tensor, x0_rendered: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
        Self::same_shape(x_t, x0_rendered)?;
        self.check(t)?;
        let (c0, ct) = self.cycle_coefficients(t, t_prev)?;
        Ok(((x0_rendered * c0)? + (x_t * ct)?)?)
    }

    /// DDIM update from `t` to `t_prev < t`. With `eta > 0` the fresh `noise` is required.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_pred: &Tensor,
        t: &[usize],
        t_prev: &[usize],
        eta: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        if eta < 0.0 {
            return Err(Error::InvalidArgument("eta must be non-negative".into()));
        }
        if t.len() != t_prev.len() {
            return Err(Error::Shape("t and t_prev lengths differ".into()));
        }
        for (&a, &b) in t.iter().zip(t_prev) {
            if b > a || (b == a && a != 0) {
                return Err(Error::InvalidArgument(format!("t_prev {b} must be below t {a}")));
            }
        }
        let x0 = self.estimate_x0(x_t, eps_pred, t)?;
        let sigma = |t: usize, t_prev: usize| -> Result<f64> {
            if eta == 0.0 || t == t_prev {
                return Ok(0.0);
            }
            let (ab_t, ab_p) = (self.alpha_bar(t)?, self.alpha_bar(t_prev)?);
            Ok(eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt())
        };
        // Index views through their position so per-view coefficients can pair t with t_prev.
        let views: Vec<usize> = (0..t.len()).collect();
        let a = self.per_view(x_t, &views, |i| Ok(self.alpha_bar(t_prev[i])?.sqrt()))?;
        let b = self.per_view(x_t, &views, |i| {
            let s = sigma(t[i], t_prev[i])?;
            Ok((1.0 - self.alpha_bar(t_prev[i])? - s * s).max(0.0).sqrt())
        })?;
        let mut out = (x0.broadcast_mul(&a)? + eps_pred.broadcast_mul(&b)?)?;
        if eta > 0.0 {
            let z = noise.ok_or_else(|| Error::InvalidArgument("eta > 0 needs a noise tensor".into()))?;
            Self::same_shape(x_t, z)?;
            let s = self.per_view(x_t, &views, |i| sigma(t[i], t_prev[i]))?;
            out = (out + z.broadcast_mul(&s)?)?;
        }
        Ok(out)
    }

    /// Maps clean images to the latent at `grid[0]` (the largest timestep of a
    /// descending grid from [`make_step_grid`]) by running the deterministic DDIM
    /// recurrence backwards. `denoiser(x, t)` must be deterministic.
    ///
    /// Each reversed step solves `ddim_step(x_next, ε(x_next, t_next), t_next, t_cur) = x_cur`
    /// by fixed-point iteration started from `ε(x_cur, t_next)`; `refine = 0` gives the
    /// usual explicit inversion.
    pub fn ddim_invert<F>(&self, x0: &Tensor, grid: &[usize], refine: usize, mut denoiser: F) -> Result<Tensor>
    where
        F: FnMut(&Tensor, usize) -> Result<Tensor>,
    {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("inversion needs at least one step".into()));
        }
        let mut x = x0.clone();
        let mut t_cur = 0usize;
        for &t_next in grid.iter().rev() {
            self.check(t_next)?;
            if t_next <= t_cur {
                return Err(Error::InvalidArgument("inversion grid must be strictly increasing".into()));
            }
            let ab_cur = self.alpha_bar(t_cur)?;
            let ab_next = self.alpha_bar(t_next)?;
            let step = |eps: &Tensor| -> Result<Tensor> {
                let x0_hat = ((&x - (eps * (1.0 - ab_cur).sqrt())?)? * (1.0 / ab_cur.max(ALPHA_BAR_FLOOR).sqrt()))?;
                Ok(((x0_hat * ab_next.sqrt())? + (eps * (1.0 - ab_next).sqrt())?)?)
            };
            let mut next = step(&denoiser(&x, t_next)?)?;
            for _ in 0..refine {
                next = step(&denoiser(&next, t_next)?)?;
            }
            x = next;
            t_cur = t_next;
        }
        Ok(x)
    }
}

/// Scalar coefficients `(c_x0, c_xt)` of the cycle step for a single transition with
/// `αₜ = alpha_t` and `ᾱ_{t-1} = alpha_bar_prev` (so `ᾱₜ = αₜ ᾱ_{t-1}`, `βₜ = 1 - αₜ`).
pub fn cycle_coefficients(alpha_t: f64, alpha_bar_prev: f64) -> (f64, f64) {
    let beta = 1.0 - alpha_t;
    let ab_t = alpha_t * alpha_bar_prev;
    let denom = 1.0 - ab_t;
    (alpha_bar_prev.sqrt() * beta / denom, alpha_t.sqrt() * (1.0 - alpha_bar_prev) / denom)
}

/// Classifier-free guidance: `uncond + scale (cond - uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps_uncond.dims(), eps_cond.dims())));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

/// Descending respaced grid `T - ⌊i T / steps⌋` for `i = 0..steps`; it starts at `T`
/// and the transition after its last entry lands on `0`.
pub fn make_step_grid(num_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > num_steps {
        return Err(Error::InvalidArgument(format!("steps must be in 1..={num_steps}, got {steps}")));
    }
    Ok((0..steps).map(|i| num_steps - i * num_steps / steps).collect())
}

/// Target timestep after grid entry `i`.
pub fn grid_prev(grid: &[usize], i: usize) -> usize {
    grid.get(i + 1).copied().unwrap_or(0)
}
