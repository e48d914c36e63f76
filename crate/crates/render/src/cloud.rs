use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::{RenderError, Result};

/// Values per Gaussian in the packed layout:
/// position (3), scale (3), rotation `w x y z` (4), opacity (1), color (3).
pub const PACKED_STRIDE: usize = 14;

/// Anisotropic 3D Gaussians stored as five attribute arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    /// Quaternions in `w x y z` order.
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, position: [f64; 3], scale: [f64; 3], rotation: [f64; 4], opacity: f64, color: [f64; 3]) {
        self.positions.push(position);
        self.scales.push(scale);
        self.rotations.push(rotation);
        self.opacities.push(opacity);
        self.colors.push(color);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extend(&mut self, other: &GaussianCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.scales.extend_from_slice(&other.scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacities.extend_from_slice(&other.opacities);
        self.colors.extend_from_slice(&other.colors);
    }

    fn check_lengths(&self) -> Result<()> {
        let n = self.positions.len();
        if self.scales.len() != n || self.rotations.len() != n || self.opacities.len() != n || self.colors.len() != n {
            return Err(RenderError::LengthMismatch);
        }
        Ok(())
    }

    /// Normalizes every quaternion in place. Zero-norm quaternions are an error.
    pub fn normalize_rotations(&mut self) -> Result<()> {
        for (i, q) in self.rotations.iter_mut().enumerate() {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 || !n.is_finite() {
                return Err(RenderError::ZeroQuaternion(i));
            }
            q.iter_mut().for_each(|v| *v /= n);
        }
        Ok(())
    }

    /// Checks the attribute invariants: unit quaternions, positive scales,
    /// opacities and colors inside `[0, 1]`, finite positions.
    pub fn validate(&self) -> Result<()> {
        self.check_lengths()?;
        let bad = |index: usize, reason: String| Err(RenderError::InvalidGaussian { index, reason });
        for i in 0..self.len() {
            if self.positions[i].iter().any(|v| !v.is_finite()) {
                return bad(i, "non-finite position".into());
            }
            if self.scales[i].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return bad(i, format!("scale {:?} not positive", self.scales[i]));
            }
            let qn = self.rotations[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if (qn - 1.0).abs() > 1e-6 {
                return bad(i, format!("quaternion norm {qn}"));
            }
            if !(0.0..=1.0).contains(&self.opacities[i]) {
                return bad(i, format!("opacity {}", self.opacities[i]));
            }
            if self.colors[i].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(i, format!("color {:?}", self.colors[i]));
            }
        }
        Ok(())
    }

    /// Flattens into `N * PACKED_STRIDE` values.
    pub fn to_packed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * PACKED_STRIDE);
        for i in 0..self.len() {
            out.extend_from_slice(&self.positions[i]);
            out.extend_from_slice(&self.scales[i]);
            out.extend_from_slice(&self.rotations[i]);
            out.push(self.opacities[i]);
            out.extend_from_slice(&self.colors[i]);
        }
        out
    }

    pub fn from_packed(values: &[f64]) -> Result<Self> {
        if values.len() % PACKED_STRIDE != 0 {
            return Err(RenderError::LengthMismatch);
        }
        let mut cloud = Self::with_capacity(values.len() / PACKED_STRIDE);
        for g in values.chunks_exact(PACKED_STRIDE) {
            cloud.push(
                [g[0], g[1], g[2]],
                [g[3], g[4], g[5]],
                [g[6], g[7], g[8], g[9]],
                g[10],
                [g[11], g[12], g[13]],
            );
        }
        Ok(cloud)
    }

    /// Applies the rigid motion `x -> rot * x + trans` to every Gaussian.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Self {
        let qr = UnitQuaternion::from_matrix(rot);
        let mut out = self.clone();
        for i in 0..self.len() {
            let p = rot * Vector3::from(self.positions[i]) + trans;
            out.positions[i] = [p.x, p.y, p.z];
            let [w, x, y, z] = self.rotations[i];
            let q = qr.into_inner() * nalgebra::Quaternion::new(w, x, y, z);
            out.rotations[i] = [q.w, q.i, q.j, q.k];
        }
        out
    }

    /// Indices reordered by `perm` (`out[k] = self[perm[k]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::with_capacity(perm.len());
        for &i in perm {
            out.push(self.positions[i], self.scales[i], self.rotations[i], self.opacities[i], self.colors[i]);
        }
        out
    }
}

/// Gradients of a scalar loss with respect to each attribute array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudGradients {
    pub positions: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    /// Same layout as [`GaussianCloud::to_packed`].
    pub fn to_packed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.positions.len() * PACKED_STRIDE);
        for i in 0..self.positions.len() {
            out.extend_from_slice(&self.positions[i]);
            out.extend_from_slice(&self.scales[i]);
            out.extend_from_slice(&self.rotations[i]);
            out.push(self.opacities[i]);
            out.extend_from_slice(&self.colors[i]);
        }
        out
    }
}
