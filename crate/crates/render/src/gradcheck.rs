use crate::raster::{render, render_backward, RenderOutput, RenderSettings};
use crate::{CameraPose, GaussianCloud, Result, PACKED_STRIDE};

/// A scalar functional of a rendering together with its gradient.
pub trait ImageLoss {
    fn value(&self, out: &RenderOutput) -> f64;
    /// `(dL/dimage, dL/dalpha)` in the layouts of [`RenderOutput`].
    fn grad(&self, out: &RenderOutput) -> (Vec<f64>, Vec<f64>);
}

/// Sum of squared differences to a target image and target mask.
pub struct L2ToTarget {
    pub image: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ImageLoss for L2ToTarget {
    fn value(&self, out: &RenderOutput) -> f64 {
        let img: f64 = out.image.iter().zip(&self.image).map(|(a, b)| (a - b) * (a - b)).sum();
        let msk: f64 = out.alpha.iter().zip(&self.alpha).map(|(a, b)| (a - b) * (a - b)).sum();
        img + msk
    }

    fn grad(&self, out: &RenderOutput) -> (Vec<f64>, Vec<f64>) {
        (
            out.image.iter().zip(&self.image).map(|(a, b)| 2.0 * (a - b)).collect(),
            out.alpha.iter().zip(&self.alpha).map(|(a, b)| 2.0 * (a - b)).collect(),
        )
    }
}

/// A loss that ignores the rendering.
pub struct ConstantLoss(pub f64);

impl ImageLoss for ConstantLoss {
    fn value(&self, _out: &RenderOutput) -> f64 {
        self.0
    }

    fn grad(&self, out: &RenderOutput) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; out.image.len()], vec![0.0; out.alpha.len()])
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error over all checked entries.
    pub max_relative_error: f64,
    /// Worst relative error per attribute: position, scale, rotation, opacity, color.
    pub per_attribute: [f64; 5],
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Opacity entries left out because the `α'` clamp is active for that Gaussian.
    pub excluded: Vec<usize>,
}

const FD_STEP: f64 = 1e-4;

/// Compares [`render_backward`] against central finite differences (step 1e-4) of
/// `loss` over every packed attribute, rendering with [`RenderSettings::exact`].
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, floor)` where `floor` is
/// 1e-4 times the largest numeric gradient magnitude, so entries that are negligible
/// next to the dominant gradients do not divide finite-difference noise by ~0.
/// Opacities of Gaussians whose `α'` reaches the clamp somewhere are excluded
/// (the loss is only subdifferentiable there).
pub fn render_gradcheck(
    cloud: &GaussianCloud,
    cam: &CameraPose,
    background: [f64; 3],
    loss: &dyn ImageLoss,
) -> Result<GradcheckReport> {
    let settings = RenderSettings::exact();
    let out = render(cloud, cam, background, &settings);
    let (d_img, d_alpha) = loss.grad(&out);
    let analytic = render_backward(cloud, cam, background, &settings, &d_img, &d_alpha)?.to_packed();

    let base = cloud.to_packed();
    let mut numeric = vec![0.0; base.len()];
    let mut params = base.clone();
    for k in 0..base.len() {
        params[k] = base[k] + FD_STEP;
        let plus = loss.value(&render(&GaussianCloud::from_packed(&params)?, cam, background, &settings));
        params[k] = base[k] - FD_STEP;
        let minus = loss.value(&render(&GaussianCloud::from_packed(&params)?, cam, background, &settings));
        params[k] = base[k];
        numeric[k] = (plus - minus) / (2.0 * FD_STEP);
    }

    // Peak gaussian value is 1 at the mean, so opacity >= max_alpha means the clamp can engage.
    let excluded: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.opacities[i] >= settings.max_alpha).collect();

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-4 * scale).max(1e-12);
    let mut per_attribute = [0.0f64; 5];
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let (gaussian, slot) = (k / PACKED_STRIDE, k % PACKED_STRIDE);
        let attr = match slot {
            0..=2 => 0,
            3..=5 => 1,
            6..=9 => 2,
            10 => 3,
            _ => 4,
        };
        if attr == 3 && excluded.contains(&gaussian) {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        per_attribute[attr] = per_attribute[attr].max(rel);
    }
    let max_relative_error = per_attribute.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport { max_relative_error, per_attribute, analytic, numeric, excluded })
}
