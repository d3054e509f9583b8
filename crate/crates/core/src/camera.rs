//! Pinhole camera: intrinsics + world-from-camera rigid pose.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Camera axes follow the OpenCV convention: +x right, +y down, +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Rotation part of the world-from-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation part (the camera center in world space).
    pub translation: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// World-space ray through pixel coordinates (px, py); pixel centers sit
    /// at integer + 0.5.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let d_cam = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let dir = (self.rotation * d_cam).normalize();
        Ray {
            origin: self.translation,
            dir,
        }
    }

    /// World point -> camera-space point.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera-space point -> pixel coordinates.
    pub fn project_cam(&self, t: &Vector3<f64>) -> [f64; 2] {
        [
            self.fx * t.x / t.z + self.cx,
            self.fy * t.y / t.z + self.cy,
        ]
    }

    /// Look-at pose: camera at `eye`, +z toward `target`, `up` as the world
    /// up hint (+y ends up pointing down in image space).
    pub fn look_at(
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: eye == target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: view direction parallel to up".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Camera::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            eye,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ray_through_principal_point_is_forward() {
        let cam = Camera::look_at(
            100.0,
            100.0,
            64,
            64,
            Vector3::new(3.0, 0.0, 0.0),
            Vector3::zeros(),
            Vector3::z(),
        )
        .unwrap();
        let r = cam.ray(32.0, 32.0);
        assert_relative_eq!(r.dir, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(r.origin, Vector3::new(3.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn projection_roundtrip() {
        let cam = Camera::look_at(
            80.0,
            90.0,
            64,
            48,
            Vector3::new(2.0, -1.0, 1.5),
            Vector3::zeros(),
            Vector3::z(),
        )
        .unwrap();
        let p = Vector3::new(0.1, 0.2, -0.05);
        let t = cam.to_camera(&p);
        assert!(t.z > 0.0);
        let px = cam.project_cam(&t);
        let ray = cam.ray(px[0], px[1]);
        // The ray must pass through p.
        let along = (p - ray.origin).dot(&ray.dir);
        let closest = ray.origin + along * ray.dir;
        assert_relative_eq!(closest, p, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_rotation() {
        let mut rot = Matrix3::identity();
        rot[(0, 0)] = 1.1;
        assert!(Camera::new(10.0, 10.0, 5.0, 5.0, 10, 10, rot, Vector3::zeros()).is_err());
    }
}
