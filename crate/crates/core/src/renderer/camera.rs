use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::RenderError;

/// Pinhole camera in the OpenCV convention: +x right, +y down, +z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major rigid world-to-camera transform.
    pub world_to_camera: [[f64; 4]; 4],
    /// Position on the capture ring; neighbouring indices are adjacent views.
    #[serde(default)]
    pub azimuth: i64,
}

impl CameraView {
    /// Camera at `eye` looking at `target`. `up` is the world up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        azimuth: i64,
    ) -> Self {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        // rows are the camera axes expressed in world coordinates
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = rot[(r, c)];
            }
            m[r][3] = t[r];
        }
        m[3][3] = 1.0;
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: m,
            azimuth,
        }
    }

    /// `count` cameras on a horizontal circle around `center`, numbered by azimuth.
    pub fn orbit(
        count: usize,
        center: [f64; 3],
        radius: f64,
        arc_degrees: f64,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Vec<Self> {
        (0..count)
            .map(|i| {
                let frac = if count > 1 {
                    i as f64 / (count - 1) as f64 - 0.5
                } else {
                    0.0
                };
                let theta = (arc_degrees * frac).to_radians();
                let eye = [
                    center[0] + radius * theta.sin(),
                    center[1],
                    center[2] - radius * theta.cos(),
                ];
                Self::look_at(eye, center, [0.0, -1.0, 0.0], focal, focal, width, height, i as i64)
            })
            .collect()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[0][3], m[1][3], m[2][3])
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let m = &self.world_to_camera;
        Matrix4::from_fn(|r, c| m[r][c])
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::ZeroSize);
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::Camera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(RenderError::Camera(format!(
                "rotation block is not orthonormal (max deviation {err:.3e})"
            )));
        }
        Ok(())
    }
}
