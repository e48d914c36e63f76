//! Reconstruction loss: per-view image MSE, a random-feature perceptual distance and
//! mask MSE, summed over supervised views.

use candle_core::{DType, Device, Tensor};

use crate::{rng, Error, Result};

/// Seed of the fixed perceptual feature pyramid.
pub const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;

/// A 3-layer convolutional pyramid (3 -> 8 -> 16 -> 32 channels, ReLU, 2x average
/// pooling between layers) with fixed random weights. Stands in for a learned
/// perceptual metric; it is deterministic and never trained.
pub struct Perceptual {
    layers: Vec<(Tensor, Tensor)>,
}

impl Perceptual {
    pub fn new(device: &Device) -> Result<Self> {
        let mut stream = rng::stream(PERCEPTUAL_SEED, "perceptual");
        let mut layers = Vec::new();
        for (c_in, c_out) in [(3usize, 8usize), (8, 16), (16, 32)] {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let w = (rng::normal_tensor(&mut stream, &[c_out, c_in, 3, 3], DType::F32, device)? * std)?;
            let b = (rng::normal_tensor(&mut stream, &[c_out], DType::F32, device)? * 0.1)?;
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = ((x.to_dtype(DType::F32)? * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2)?;
            }
            h = h.conv2d(w, 1, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn device(&self) -> &Device {
        self.layers[0].0.device()
    }

    /// Per-image distance `[S]` between `[S, 3, H, W]` batches in `[0, 1]`: the sum over
    /// layers of the mean squared feature difference.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = (x - y)?.sqr()?.flatten_from(1)?.mean(1)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok(total.expect("pyramid has layers").to_dtype(a.dtype())?)
    }
}

pub struct LossParts {
    /// `image + mask`.
    pub total: Tensor,
    /// Sum over views of image MSE plus `λ` times the perceptual distance.
    pub image: Tensor,
    pub mask: Tensor,
    /// Unweighted perceptual part of `image`.
    pub perceptual: Tensor,
}

/// `renders` is `[S, 4, H, W]` (RGB then alpha), `images` `[S, 3, H, W]`, `masks`
/// `[S, 1, H, W]`. Squared errors are averaged per view and summed over views.
pub fn compute_loss(
    renders: &Tensor,
    images: &Tensor,
    masks: &Tensor,
    lambda: f64,
    perceptual: &Perceptual,
) -> Result<LossParts> {
    let (s, c, h, w) = renders.dims4()?;
    if c != 4 || images.dims() != [s, 3, h, w] || masks.dims() != [s, 1, h, w] {
        return Err(Error::Shape(format!(
            "renders {:?}, images {:?}, masks {:?}",
            renders.dims(),
            images.dims(),
            masks.dims()
        )));
    }
    let rgb = renders.narrow(1, 0, 3)?;
    let alpha = renders.narrow(1, 3, 1)?;
    let per_view_mse = |a: &Tensor, b: &Tensor| -> Result<Tensor> { Ok((a - b)?.sqr()?.flatten_from(1)?.mean(1)?) };
    let mse = per_view_mse(&rgb, images)?.sum_all()?;
    let perc = perceptual.distance(&rgb, images)?.sum_all()?;
    let image = (mse + (&perc * lambda)?)?;
    let mask = per_view_mse(&alpha, masks)?.sum_all()?;
    Ok(LossParts { total: (&image + &mask)?, image, mask, perceptual: perc })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(seed: u64, s: usize) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        let mut st = rng::stream(seed, "img");
        let img = candle_nn::ops::sigmoid(&rng::normal_tensor(&mut st, &[s, 3, 8, 8], DType::F32, &dev).unwrap()).unwrap();
        let mask = candle_nn::ops::sigmoid(&rng::normal_tensor(&mut st, &[s, 1, 8, 8], DType::F32, &dev).unwrap()).unwrap();
        (img, mask)
    }

    #[test]
    fn identical_inputs_have_zero_loss() {
        let p = Perceptual::new(&Device::Cpu).unwrap();
        let (img, mask) = batch(0, 3);
        let renders = Tensor::cat(&[&img, &mask], 1).unwrap();
        let l = compute_loss(&renders, &img, &mask, 0.5, &p).unwrap();
        assert_eq!(scalar(&l.total).unwrap(), 0.0);
    }

    #[test]
    fn zero_lambda_is_plain_mse() {
        let p = Perceptual::new(&Device::Cpu).unwrap();
        let (img, mask) = batch(1, 2);
        let (other, _) = batch(2, 2);
        let renders = Tensor::cat(&[&other, &mask], 1).unwrap();
        let l = compute_loss(&renders, &img, &mask, 0.0, &p).unwrap();
        let a = img.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = other.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let per_view = 3 * 64;
        let expected: f64 = a.chunks(per_view).zip(b.chunks(per_view))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / per_view as f64)
            .sum();
        assert!((scalar(&l.image).unwrap() - expected).abs() < 1e-6);
        assert!(scalar(&l.perceptual).unwrap() > 0.0);
    }

    #[test]
    fn mask_term_is_mean_per_pixel() {
        let p = Perceptual::new(&Device::Cpu).unwrap();
        let dev = Device::Cpu;
        let img = Tensor::zeros((1, 3, 8, 8), DType::F32, &dev).unwrap();
        let gt_mask = Tensor::zeros((1, 1, 8, 8), DType::F32, &dev).unwrap();
        // k = 5 pixels off by exactly 1.
        let mut m = vec![0f32; 64];
        for v in m.iter_mut().take(5) {
            *v = 1.0;
        }
        let mask = Tensor::from_vec(m, (1, 1, 8, 8), &dev).unwrap();
        let renders = Tensor::cat(&[&img, &mask], 1).unwrap();
        let l = compute_loss(&renders, &img, &gt_mask, 0.5, &p).unwrap();
        assert!((scalar(&l.mask).unwrap() - 5.0 / 64.0).abs() < 1e-7);
    }
}
