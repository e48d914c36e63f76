use nalgebra::{Matrix3, Matrix4, Point3, Vector3};

use crate::{RenderError, Result};

/// Pinhole camera in OpenCV convention (x right, y down, z forward).
///
/// Pixel `(col, row)` has its center at `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// Rotation block of the world-to-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation of the world-to-camera transform.
    pub translation: Vector3<f64>,
    pub focal: f64,
    pub principal_point: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Camera at `eye` looking at `target`. `up` is the approximate world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(RenderError::InvalidCamera("eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(RenderError::InvalidCamera("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        // y points down in image space.
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let cam = Self {
            rotation,
            translation,
            focal,
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera on a sphere around the origin, z up. Angles in degrees.
    pub fn orbit(
        radius: f64,
        azimuth_deg: f64,
        elevation_deg: f64,
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = Vector3::new(radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin());
        let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self::look_at(eye, Vector3::zeros(), Vector3::z(), focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(RenderError::InvalidCamera(format!("focal {} must be positive", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("zero resolution".into()));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(RenderError::InvalidCamera("rotation block is not a proper rotation".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates and camera depth of a world point.
    pub fn project_point(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        (
            self.focal * c.x / c.z + self.principal_point.0,
            self.focal * c.y / c.z + self.principal_point.1,
            c.z,
        )
    }

    /// World-space ray through continuous pixel coordinates `(u, v)`; direction is unit length.
    pub fn ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let d_cam = Vector3::new(
            (u - self.principal_point.0) / self.focal,
            (v - self.principal_point.1) / self.focal,
            1.0,
        );
        (self.center(), (self.rotation.transpose() * d_cam).normalize())
    }

    /// World point at camera depth `z` (not ray distance) along pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let c = Point3::new(
            (u - self.principal_point.0) / self.focal * z,
            (v - self.principal_point.1) / self.focal * z,
            z,
        );
        self.rotation.transpose() * (c.coords - self.translation)
    }

    /// Same camera after the world is moved by `x -> rot * x + trans`.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Self {
        let rotation = self.rotation * rot.transpose();
        Self {
            rotation,
            translation: self.translation - rotation * trans,
            ..self.clone()
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
