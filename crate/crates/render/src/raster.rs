use nalgebra::Matrix2;

use crate::project::{project_one, project_one_backward, Projected};
use crate::{CameraPose, CloudGradients, GaussianCloud, RenderError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Added to the 2D covariance diagonal, in px².
    pub low_pass: f64,
    /// Gaussians at or in front of this camera depth are culled.
    pub near: f64,
    /// Per-pixel contributions with `α' < alpha_cutoff` are skipped.
    pub alpha_cutoff: f64,
    /// Compositing stops before transmittance would drop below this.
    pub transmittance_floor: f64,
    /// Upper clamp on `α'`.
    pub max_alpha: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { low_pass: 0.3, near: 0.01, alpha_cutoff: 1.0 / 255.0, transmittance_floor: 1e-4, max_alpha: 0.99 }
    }
}

impl RenderSettings {
    /// No contribution cutoff and no early termination, so the image is a smooth
    /// function of the attributes (used for finite-difference checks).
    pub fn exact() -> Self {
        Self { alpha_cutoff: 0.0, transmittance_floor: 0.0, ..Self::default() }
    }
}

/// Rendered image, alpha mask and alpha-normalized depth for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H x W x 3`.
    pub image: Vec<f64>,
    /// Row-major `H x W`; equals `1 - transmittance`.
    pub alpha: Vec<f64>,
    /// Expected camera depth of the visible Gaussians, 0 where nothing was hit.
    pub depth: Vec<f64>,
}

impl RenderOutput {
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let k = (row * self.width + col) * 3;
        [self.image[k], self.image[k + 1], self.image[k + 2]]
    }
}

struct Splat {
    index: usize,
    proj: Projected,
    opacity: f64,
    /// Pixel bounding box `[x0, x1) x [y0, y1)` in continuous coordinates, or unbounded.
    bbox: Option<[f64; 4]>,
}

fn prepare(cloud: &GaussianCloud, cam: &CameraPose, s: &RenderSettings) -> Vec<Splat> {
    let mut splats: Vec<Splat> = (0..cloud.len())
        .filter_map(|i| {
            let proj = project_one(&cloud.positions[i], &cloud.scales[i], &cloud.rotations[i], cam, s.low_pass, s.near);
            if proj.culled {
                return None;
            }
            let opacity = cloud.opacities[i];
            let bbox = if s.alpha_cutoff > 0.0 {
                // Outside this radius α·exp(-½ dᵀKd) < cutoff, since dᵀKd ≥ |d|²/λ_max.
                if opacity.min(s.max_alpha) < s.alpha_cutoff {
                    return None;
                }
                let r = (2.0 * proj.max_eigenvalue() * (opacity / s.alpha_cutoff).ln()).sqrt();
                Some([proj.mean[0] - r, proj.mean[0] + r, proj.mean[1] - r, proj.mean[1] + r])
            } else {
                None
            };
            Some(Splat { index: i, proj, opacity, bbox })
        })
        .collect();
    splats.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth).then(a.index.cmp(&b.index)));
    splats
}

#[derive(Clone, Copy)]
struct Contribution {
    splat: usize,
    alpha: f64,
    transmittance: f64,
    gauss: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

/// Front-to-back compositing for the pixel centered at `(px, py)`.
/// Returns the final transmittance.
fn composite(splats: &[Splat], px: f64, py: f64, s: &RenderSettings, out: &mut Vec<Contribution>) -> f64 {
    out.clear();
    let mut t = 1.0;
    for (k, sp) in splats.iter().enumerate() {
        if let Some([x0, x1, y0, y1]) = sp.bbox {
            if px < x0 || px > x1 || py < y0 || py > y1 {
                continue;
            }
        }
        let dx = px - sp.proj.mean[0];
        let dy = py - sp.proj.mean[1];
        let [a, b, c] = sp.proj.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        let gauss = power.exp();
        let raw = sp.opacity * gauss;
        let clamped = raw > s.max_alpha;
        let alpha = if clamped { s.max_alpha } else { raw };
        if alpha < s.alpha_cutoff {
            continue;
        }
        let next = t * (1.0 - alpha);
        if next < s.transmittance_floor {
            break;
        }
        out.push(Contribution { splat: k, alpha, transmittance: t, gauss, clamped, dx, dy });
        t = next;
    }
    t
}

/// Renders `cloud` from `cam` over a constant `background` color.
pub fn render(cloud: &GaussianCloud, cam: &CameraPose, background: [f64; 3], settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let splats = prepare(cloud, cam, settings);
    let mut image = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut contribs = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let t_final = composite(&splats, col as f64 + 0.5, row as f64 + 0.5, settings, &mut contribs);
            let mut rgb = [0.0; 3];
            let mut z = 0.0;
            for c in &contribs {
                let weight = c.alpha * c.transmittance;
                let color = &cloud.colors[splats[c.splat].index];
                for ch in 0..3 {
                    rgb[ch] += color[ch] * weight;
                }
                z += splats[c.splat].proj.depth * weight;
            }
            let p = row * w + col;
            for ch in 0..3 {
                image[p * 3 + ch] = rgb[ch] + background[ch] * t_final;
            }
            let a = 1.0 - t_final;
            alpha[p] = a;
            depth[p] = if a > 1e-12 { z / a } else { 0.0 };
        }
    }
    RenderOutput { width: w, height: h, image, alpha, depth }
}

/// Gradients of a loss w.r.t. all Gaussian attributes given `dL/dimage` (`H x W x 3`)
/// and `dL/dalpha` (`H x W`). Depth is treated as a non-differentiable diagnostic.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &CameraPose,
    background: [f64; 3],
    settings: &RenderSettings,
    d_image: &[f64],
    d_alpha: &[f64],
) -> Result<CloudGradients> {
    let (w, h) = (cam.width, cam.height);
    if d_image.len() != w * h * 3 {
        return Err(RenderError::GradientShape { expected: w * h * 3, got: d_image.len() });
    }
    if d_alpha.len() != w * h {
        return Err(RenderError::GradientShape { expected: w * h, got: d_alpha.len() });
    }
    let splats = prepare(cloud, cam, settings);
    let mut grads = CloudGradients::zeros(cloud.len());
    let mut d_mean = vec![[0.0; 2]; splats.len()];
    let mut d_conic = vec![Matrix2::<f64>::zeros(); splats.len()];
    let mut contribs = Vec::new();

    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let g_rgb = [d_image[p * 3], d_image[p * 3 + 1], d_image[p * 3 + 2]];
            let g_a = d_alpha[p];
            if g_rgb == [0.0; 3] && g_a == 0.0 {
                continue;
            }
            composite(&splats, col as f64 + 0.5, row as f64 + 0.5, settings, &mut contribs);
            // Walk back to front keeping the color behind each contribution and the
            // product of (1 - α) behind it.
            let mut behind = background;
            let mut keep = 1.0;
            for c in contribs.iter().rev() {
                let sp = &splats[c.splat];
                let gi = sp.index;
                let color = cloud.colors[gi];
                let weight = c.alpha * c.transmittance;
                for ch in 0..3 {
                    grads.colors[gi][ch] += g_rgb[ch] * weight;
                }
                let mut g_alpha = 0.0;
                for ch in 0..3 {
                    g_alpha += g_rgb[ch] * (color[ch] - behind[ch]);
                }
                g_alpha = c.transmittance * (g_alpha + g_a * keep);
                for ch in 0..3 {
                    behind[ch] = color[ch] * c.alpha + (1.0 - c.alpha) * behind[ch];
                }
                keep *= 1.0 - c.alpha;

                if c.clamped {
                    continue;
                }
                grads.opacities[gi] += g_alpha * c.gauss;
                let g_power = g_alpha * sp.opacity * c.gauss;
                let [a, b, cc] = sp.proj.conic;
                d_mean[c.splat][0] += g_power * (a * c.dx + b * c.dy);
                d_mean[c.splat][1] += g_power * (b * c.dx + cc * c.dy);
                let k = &mut d_conic[c.splat];
                k[(0, 0)] += -0.5 * g_power * c.dx * c.dx;
                k[(0, 1)] += -0.5 * g_power * c.dx * c.dy;
                k[(1, 0)] += -0.5 * g_power * c.dx * c.dy;
                k[(1, 1)] += -0.5 * g_power * c.dy * c.dy;
            }
        }
    }

    for (k, sp) in splats.iter().enumerate() {
        if d_mean[k] == [0.0; 2] && d_conic[k] == Matrix2::zeros() {
            continue;
        }
        let i = sp.index;
        let geo = project_one_backward(
            &cloud.positions[i],
            &cloud.scales[i],
            &cloud.rotations[i],
            cam,
            settings.low_pass,
            d_mean[k],
            d_conic[k],
        );
        grads.positions[i] = geo.position;
        grads.scales[i] = geo.scale;
        grads.rotations[i] = geo.rotation;
    }
    Ok(grads)
}
