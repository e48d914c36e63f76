//! The splat rasterizer as an autodiff node: packed `[N, 14]` attributes in,
//! `[4, H, W]` (RGB then alpha) out, with the analytic backward pass attached.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use gencycle_render::{render, render_backward, CameraPose, GaussianCloud, RenderSettings, PACKED_STRIDE};

use crate::{Error, Result};

pub struct RenderOp {
    pub camera: CameraPose,
    pub background: [f64; 3],
    pub settings: RenderSettings,
}

fn packed_values(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("render op needs a contiguous input".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => return Err(candle_core::Error::Msg("render op supports f32 and f64".into())),
    })
}

fn cloud_from(values: &[f64]) -> candle_core::Result<GaussianCloud> {
    GaussianCloud::from_packed(values).map_err(|e| candle_core::Error::Msg(e.to_string()))
}

impl CustomOp1 for RenderOp {
    fn name(&self) -> &'static str {
        "splat-render"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let cloud = cloud_from(&packed_values(storage, layout)?)?;
        let out = render(&cloud, &self.camera, self.background, &self.settings);
        let (w, h) = (out.width, out.height);
        let mut planes = vec![0.0f64; 4 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                planes[c * w * h + p] = out.image[p * 3 + c];
            }
            planes[3 * w * h + p] = out.alpha[p];
        }
        let storage = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(planes.iter().map(|&v| v as f32).collect()),
            _ => CpuStorage::F64(planes),
        };
        Ok((storage, Shape::from((4, h, w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dtype = arg.dtype();
        let values = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let cloud = cloud_from(&values)?;
        let g = grad_res.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (w, h) = (self.camera.width, self.camera.height);
        let mut d_image = vec![0.0; w * h * 3];
        for p in 0..w * h {
            for c in 0..3 {
                d_image[p * 3 + c] = g[c * w * h + p];
            }
        }
        let d_alpha = g[3 * w * h..].to_vec();
        let grads = render_backward(&cloud, &self.camera, self.background, &self.settings, &d_image, &d_alpha)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let t = Tensor::from_vec(grads.to_packed(), (cloud.len(), PACKED_STRIDE), arg.device())?.to_dtype(dtype)?;
        Ok(Some(t))
    }
}

/// Renders packed Gaussians from `camera`, differentiably in the packed attributes.
pub fn render_tensor(packed: &Tensor, camera: &CameraPose, background: [f64; 3]) -> Result<Tensor> {
    let (_, stride) = packed.dims2()?;
    if stride != PACKED_STRIDE {
        return Err(Error::Shape(format!("packed Gaussians need {PACKED_STRIDE} columns, got {stride}")));
    }
    let op = RenderOp { camera: camera.clone(), background, settings: RenderSettings::default() };
    Ok(packed.contiguous()?.apply_op1(op)?)
}

/// Converts a packed `[N, 14]` tensor to a cloud.
pub fn tensor_to_cloud(packed: &Tensor) -> Result<GaussianCloud> {
    let values = packed.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(GaussianCloud::from_packed(&values)?)
}

pub fn cloud_to_tensor(cloud: &GaussianCloud, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(cloud.to_packed(), (cloud.len(), PACKED_STRIDE), device)?.to_dtype(dtype)?)
}
