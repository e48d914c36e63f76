use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::{CameraPose, GaussianCloud, RenderError, Result};

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    /// Pixel-space mean.
    pub mean: [f64; 2],
    /// 2D covariance `[xx, xy, yy]`, low-pass dilation included.
    pub cov: [f64; 3],
    /// Inverse of `cov` as `[a, b, c]`, i.e. `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z of the mean.
    pub depth: f64,
    /// Behind the near plane.
    pub culled: bool,
}

impl Projected {
    fn culled(depth: f64) -> Self {
        Self { mean: [0.0; 2], cov: [0.0; 3], conic: [0.0; 3], depth, culled: true }
    }

    /// Largest eigenvalue of the 2D covariance.
    pub fn max_eigenvalue(&self) -> f64 {
        let [a, b, c] = self.cov;
        let mid = 0.5 * (a + c);
        mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt()
    }
}

pub(crate) fn rotation_from_quaternion(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of the rotation matrix w.r.t. the (already unit) quaternion entries.
fn rotation_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(0.0, t * y, t * z, t * y, -2.0 * t * x, -t * w, t * z, t * w, -2.0 * t * x),
        Matrix3::new(-2.0 * t * y, t * x, t * w, t * x, 0.0, t * z, -t * w, t * z, -2.0 * t * y),
        Matrix3::new(-2.0 * t * z, -t * w, t * x, t * w, -2.0 * t * z, t * y, t * x, t * y, 0.0),
    ]
}

fn normalized(q: &[f64; 4]) -> Option<([f64; 4], f64)> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 || !n.is_finite() {
        return None;
    }
    Some(([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n))
}

/// `Σ = R diag(s²) Rᵀ` for a scale vector and a (possibly unnormalized) quaternion.
pub fn covariance_3d(scale: &[f64; 3], rotation: &[f64; 4]) -> Result<Matrix3<f64>> {
    let (q, _) = normalized(rotation).ok_or(RenderError::ZeroQuaternion(0))?;
    let m = rotation_from_quaternion(&q) * Matrix3::from_diagonal(&Vector3::from(*scale));
    Ok(m * m.transpose())
}

fn jacobian(cam: &CameraPose, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let f = cam.focal;
    let iz = 1.0 / pc.z;
    Matrix2x3::new(f * iz, 0.0, -f * pc.x * iz * iz, 0.0, f * iz, -f * pc.y * iz * iz)
}

pub(crate) fn project_one(
    position: &[f64; 3],
    scale: &[f64; 3],
    rotation: &[f64; 4],
    cam: &CameraPose,
    low_pass: f64,
    near: f64,
) -> Projected {
    let pc = cam.to_camera(&Vector3::from(*position));
    if pc.z <= near {
        return Projected::culled(pc.z);
    }
    // A zero quaternion cannot occur for validated clouds; treat it as identity here.
    let q = normalized(rotation).map(|(q, _)| q).unwrap_or([1.0, 0.0, 0.0, 0.0]);
    let m = rotation_from_quaternion(&q) * Matrix3::from_diagonal(&Vector3::from(*scale));
    let sigma_c = cam.rotation * (m * m.transpose()) * cam.rotation.transpose();
    let j = jacobian(cam, &pc);
    let cov = j * sigma_c * j.transpose() + Matrix2::identity() * low_pass;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    Projected {
        mean: [
            cam.focal * pc.x / pc.z + cam.principal_point.0,
            cam.focal * pc.y / pc.z + cam.principal_point.1,
        ],
        cov: [cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]],
        conic,
        depth: pc.z,
        culled: false,
    }
}

/// Projects every Gaussian with the EWA linearization `J W Σ Wᵀ Jᵀ + λ I`.
pub fn project(cloud: &GaussianCloud, cam: &CameraPose, low_pass: f64, near: f64) -> Vec<Projected> {
    (0..cloud.len())
        .map(|i| project_one(&cloud.positions[i], &cloud.scales[i], &cloud.rotations[i], cam, low_pass, near))
        .collect()
}

/// Gradients flowing into one Gaussian's geometry.
pub(crate) struct GeometryGrad {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
}

/// Backpropagates `dL/dmean` and `dL/dK` (K the 2x2 conic matrix, entries treated as
/// independent) through the projection of one non-culled Gaussian.
pub(crate) fn project_one_backward(
    position: &[f64; 3],
    scale: &[f64; 3],
    rotation: &[f64; 4],
    cam: &CameraPose,
    low_pass: f64,
    d_mean: [f64; 2],
    d_conic: Matrix2<f64>,
) -> GeometryGrad {
    let pc = cam.to_camera(&Vector3::from(*position));
    let (q, qnorm) = normalized(rotation).unwrap_or(([1.0, 0.0, 0.0, 0.0], 1.0));
    let rot = rotation_from_quaternion(&q);
    let s = Vector3::from(*scale);
    let m = rot * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    let w = cam.rotation;
    let sigma_c = w * sigma * w.transpose();
    let j = jacobian(cam, &pc);
    let cov = j * sigma_c * j.transpose() + Matrix2::identity() * low_pass;
    let conic = cov.try_inverse().unwrap_or_else(Matrix2::zeros);

    // K = cov⁻¹  =>  dL/dcov = -K dL/dK K
    let g_cov = -(conic * d_conic * conic);
    let g_cov = 0.5 * (g_cov + g_cov.transpose());
    let g_sigma_c = j.transpose() * g_cov * j;
    let g_j = 2.0 * g_cov * j * sigma_c;
    let g_sigma = w.transpose() * g_sigma_c * w;
    let g_m = 2.0 * g_sigma * m;

    let mut g_scale = [0.0; 3];
    let mut g_rot_mat = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            g_scale[c] += g_m[(r, c)] * rot[(r, c)];
            g_rot_mat[(r, c)] = g_m[(r, c)] * s[c];
        }
    }
    let partials = rotation_partials(&q);
    let mut g_qhat = [0.0; 4];
    for k in 0..4 {
        g_qhat[k] = partials[k].component_mul(&g_rot_mat).sum();
    }
    let dot: f64 = (0..4).map(|k| g_qhat[k] * q[k]).sum();
    let g_rotation = [
        (g_qhat[0] - q[0] * dot) / qnorm,
        (g_qhat[1] - q[1] * dot) / qnorm,
        (g_qhat[2] - q[2] * dot) / qnorm,
        (g_qhat[3] - q[3] * dot) / qnorm,
    ];

    // Mean and Jacobian depend on the camera-space point.
    let f = cam.focal;
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let dm = Vector2::new(d_mean[0], d_mean[1]);
    let mut g_pc = Vector3::new(
        dm.x * f * iz,
        dm.y * f * iz,
        -dm.x * f * pc.x * iz2 - dm.y * f * pc.y * iz2,
    );
    g_pc.x += g_j[(0, 2)] * (-f * iz2);
    g_pc.y += g_j[(1, 2)] * (-f * iz2);
    g_pc.z += (g_j[(0, 0)] + g_j[(1, 1)]) * (-f * iz2)
        + g_j[(0, 2)] * (2.0 * f * pc.x * iz3)
        + g_j[(1, 2)] * (2.0 * f * pc.y * iz3);
    let g_p = w.transpose() * g_pc;

    GeometryGrad { position: [g_p.x, g_p.y, g_p.z], scale: g_scale, rotation: g_rotation }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_covariance() {
        let c = covariance_3d(&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0))).abs().max() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = covariance_3d(&[1.0, 2.0, 1.0], &[h, 0.0, 0.0, h]).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(covariance_3d(&[1.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn on_axis_isotropic_projection_matches_closed_form() {
        let cam = CameraPose::orbit(2.0, 40.0, 0.0, 50.0, 32, 32).unwrap();
        let mut cloud = GaussianCloud::new();
        cloud.push([0.0; 3], [0.05; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [1.0; 3]);
        let p = project(&cloud, &cam, 0.3, 0.01)[0];
        assert!((p.mean[0] - 16.0).abs() < 1e-9 && (p.mean[1] - 16.0).abs() < 1e-9);
        let expected = (cam.focal * 0.05 / 2.0).powi(2) + 0.3;
        assert!((p.cov[0] - expected).abs() < 1e-9);
        assert!((p.cov[2] - expected).abs() < 1e-9);
        assert!(p.cov[1].abs() < 1e-9);
        assert!((p.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = CameraPose::orbit(2.0, 0.0, 0.0, 50.0, 16, 16).unwrap();
        let mut cloud = GaussianCloud::new();
        cloud.push([3.0, 0.0, 0.0], [0.1; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [1.0; 3]);
        assert!(project(&cloud, &cam, 0.3, 0.01)[0].culled);
    }
}
