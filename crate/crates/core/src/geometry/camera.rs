use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera: world-from-camera rigid pose plus zero-skew intrinsics.
///
/// Camera frame convention: +x right, +y down, +z forward (viewing
/// direction). Pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    /// Row-major 4×4 world-from-camera transform.
    pub pose: [f64; 16],
    /// Row-major 3×3 intrinsics `[fx 0 cx; 0 fy cy; 0 0 1]`.
    pub intrinsics: [f64; 9],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(pose: &Matrix4<f64>, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let mut p = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                p[r * 4 + c] = pose[(r, c)];
            }
        }
        Camera {
            pose: p,
            intrinsics: [fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0],
            width,
            height,
        }
    }

    /// Camera at `eye` looking at `target`, principal point at the image
    /// center, vertical field of view in degrees.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Invalid("look_at: eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Invalid("look_at: up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rot = Matrix3::from_columns(&[right, down, forward]);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Ok(Self::new(
            &rigid(&rot, &eye),
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
        ))
    }

    pub fn pose_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.pose)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose_matrix().fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.pose[3], self.pose[7], self.pose[11])
    }

    /// Unit optical axis in world coordinates.
    pub fn view_dir(&self) -> Vector3<f64> {
        self.rotation().column(2).into_owned()
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[4]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[5]
    }

    pub fn with_pose(&self, pose: &Matrix4<f64>) -> Camera {
        let mut c = Camera::new(pose, self.fx(), self.fy(), self.cx(), self.cy(), self.width, self.height);
        c.intrinsics = self.intrinsics;
        c
    }

    /// Same camera imaging at another resolution.
    pub fn scaled_to(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut c = self.clone();
        c.intrinsics[0] *= sx;
        c.intrinsics[2] *= sx;
        c.intrinsics[4] *= sy;
        c.intrinsics[5] *= sy;
        c.width = width;
        c.height = height;
        c
    }

    pub(crate) fn check_intrinsics(&self) -> Result<()> {
        let k = &self.intrinsics;
        let ok = k.iter().all(|v| v.is_finite())
            && k[0] > 0.0
            && k[4] > 0.0
            && k[1] == 0.0
            && k[3] == 0.0
            && k[6] == 0.0
            && k[7] == 0.0
            && k[8] == 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("singular or malformed intrinsics {k:?}")))
        }
    }

    /// Full validity check: orthonormal rotation with det +1, positive focal
    /// lengths and a principal point inside the image.
    pub fn validate(&self) -> Result<()> {
        self.check_intrinsics()?;
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() <= 0.0 {
            return Err(Error::Invalid(format!(
                "pose rotation is not a proper rotation (orthogonality error {err:e})"
            )));
        }
        let bottom = &self.pose[12..];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invalid("pose bottom row must be [0 0 0 1]".into()));
        }
        if !(self.cx() > 0.0 && self.cx() < self.width as f64 && self.cy() > 0.0 && self.cy() < self.height as f64) {
            return Err(Error::Invalid("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Continuous pixel coordinates of a world point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let local = self.rotation().transpose() * (p - self.center());
        if local.z <= 0.0 {
            return None;
        }
        Some((
            self.fx() * local.x / local.z + self.cx(),
            self.fy() * local.y / local.z + self.cy(),
        ))
    }
}

pub(crate) fn rigid(rot: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_forward() {
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 50.0, 32, 32).unwrap();
        cam.validate().unwrap();
        assert!((cam.view_dir() - Vector3::z()).norm() < 1e-12);
        // World up appears toward smaller v (image y points down).
        let (_, v) = cam.project(&Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert!(v < 16.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let cam = Camera::look_at(Vector3::new(1.3, 0.7, -2.9), Vector3::new(0.1, 0.0, 0.2), Vector3::y(), 47.0, 48, 40).unwrap();
        let s = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn validation_rejects_bad_cameras() {
        let mut cam = Camera::new(&Matrix4::identity(), 10.0, 10.0, 8.0, 8.0, 16, 16);
        cam.validate().unwrap();
        cam.intrinsics[0] = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = Camera::new(&Matrix4::identity(), 10.0, 10.0, 8.0, 8.0, 16, 16);
        cam.pose[0] = 2.0;
        assert!(cam.validate().is_err());
    }
}
