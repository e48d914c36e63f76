//! Image quality metrics and the cross-view reprojection consistency error.
//!
//! Images are row-major `H x W x 3` slices with values in `[0, 1]`.

use gencycle_render::CameraPose;
use nalgebra::Vector3;

use crate::{Error, Result};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Largest depth disagreement for a reprojected pixel to count as co-visible.
pub const DEPTH_TOLERANCE: f64 = 0.1;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn grayscale(img: &[f64], pixels: usize) -> Vec<f64> {
    (0..pixels).map(|p| (img[p * 3] + img[p * 3 + 1] + img[p * 3 + 2]) / 3.0).collect()
}

/// Valid-region separable Gaussian filter.
fn filter(x: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; oh * w];
    for r in 0..oh {
        for c in 0..w {
            rows[r * w + c] = (0..k).map(|i| g[i] * x[(r + i) * w + c]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[r * w + c + i]).sum();
        }
    }
    out
}

/// Mean SSIM of the channel-mean grayscale images over an 11x11 Gaussian window
/// (σ = 1.5), valid region only.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    let n = width * height;
    if a.len() != n * 3 || b.len() != n * 3 {
        return Err(Error::Shape(format!("expected {} values, got {} and {}", n * 3, a.len(), b.len())));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let (x, y) = (grayscale(a, n), grayscale(b, n));
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_x = filter(&x, width, height, &g);
    let mu_y = filter(&y, width, height, &g);
    let xx = filter(&prod(&x, &x), width, height, &g);
    let yy = filter(&prod(&y, &y), width, height, &g);
    let xy = filter(&prod(&x, &y), width, height, &g);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = xx[i] - mx * mx;
        let sy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// One view for [`consistency_error`]: image, per-pixel camera depth and mask.
pub struct ViewObservation<'a> {
    pub camera: &'a CameraPose,
    pub image: &'a [f64],
    pub depth: &'a [f64],
    pub mask: &'a [f64],
}

fn bilinear(img: &[f64], w: usize, h: usize, u: f64, v: f64) -> [f64; 3] {
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |r: usize, col: usize| img[(r * w + col) * 3 + c];
        *o = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
    }
    out
}

/// Mean absolute color difference between every masked pixel of every view and its
/// depth-guided reprojection into every other view, over co-visible pixels (inside
/// the other image, masked there, and with matching depth). `None` when there are no
/// co-visible pixels, which includes the single-view case.
pub fn consistency_error(views: &[ViewObservation]) -> Result<Option<f64>> {
    for v in views {
        let n = v.camera.pixel_count();
        if v.image.len() != 3 * n || v.depth.len() != n || v.mask.len() != n {
            return Err(Error::Shape("view buffers do not match the camera size".into()));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, src) in views.iter().enumerate() {
        let (w, h) = (src.camera.width, src.camera.height);
        for row in 0..h {
            for col in 0..w {
                let p = row * w + col;
                if src.mask[p] <= 0.5 || src.depth[p] <= 0.0 {
                    continue;
                }
                let world: Vector3<f64> = src.camera.unproject(col as f64 + 0.5, row as f64 + 0.5, src.depth[p]);
                for (j, dst) in views.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let (dw, dh) = (dst.camera.width, dst.camera.height);
                    let (u, v, z) = dst.camera.project_point(&world);
                    if z <= 0.0 || u < 0.5 || v < 0.5 || u > dw as f64 - 0.5 || v > dh as f64 - 0.5 {
                        continue;
                    }
                    let q = (v as usize).min(dh - 1) * dw + (u as usize).min(dw - 1);
                    if dst.mask[q] <= 0.5 || (dst.depth[q] - z).abs() > DEPTH_TOLERANCE {
                        continue;
                    }
                    let c = bilinear(dst.image, dw, dh, u, v);
                    total += (0..3).map(|k| (src.image[p * 3 + k] - c[k]).abs()).sum::<f64>() / 3.0;
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { None } else { Some(total / count as f64) })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub perceptual: Vec<f64>,
    pub consistency: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn mean(values: &[f64]) -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        values.iter().sum::<f64>() / values.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        Self::mean(&self.psnr)
    }

    /// Flat `key=value` summary.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s += &format!("seed={}\nconfig_hash={}\nviews={}\n", self.seed, self.config_hash, self.psnr.len());
        s += &format!("psnr={:.6}\nssim={:.6}\nperceptual={:.6}\n", self.mean_psnr(), Self::mean(&self.ssim), Self::mean(&self.perceptual));
        match self.consistency {
            Some(c) => s += &format!("consistency={c:.6}\n"),
            None => s += "consistency=absent\n",
        }
        s
    }

    /// Per-view rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim,perceptual\n");
        for i in 0..self.psnr.len() {
            s += &format!("{i},{:.6},{:.6},{:.6}\n", self.psnr[i], self.ssim[i], self.perceptual[i]);
        }
        s
    }
}
