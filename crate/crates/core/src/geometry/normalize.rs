use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::camera::rigid;
use super::Camera;
use crate::error::{Error, Result};

/// World-to-normalized similarity `x ↦ scale · rotationᵀ · (x − origin)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// Row-major rotation of the reference frame (world-from-reference).
    pub rotation: [f64; 9],
    pub origin: [f64; 3],
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            origin: [0.0; 3],
            scale: 1.0,
        }
    }

    fn rot(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rot().transpose() * (p - Vector3::from_row_slice(&self.origin)))
    }

    /// Maps a camera into the normalized frame; intrinsics are unchanged.
    pub fn apply(&self, cam: &Camera) -> Camera {
        let r = self.rot().transpose() * cam.rotation();
        let c = self.apply_point(&cam.center());
        cam.with_pose(&rigid(&r, &c))
    }
}

/// Normalizes a set of context cameras: the first becomes the identity pose
/// and the mean distance of camera centers from their centroid becomes 1
/// (scale 1 when the centers coincide). Returns the transform so that
/// target cameras can be mapped identically.
pub fn normalize_poses(cams: &[Camera]) -> Result<(Vec<Camera>, Similarity)> {
    let first = cams
        .first()
        .ok_or_else(|| Error::Invalid("normalize_poses needs at least one camera".into()))?;
    let r0 = first.rotation();
    let c0 = first.center();
    let mut rotation = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            rotation[r * 3 + c] = r0[(r, c)];
        }
    }
    let mut sim = Similarity {
        rotation,
        origin: [c0.x, c0.y, c0.z],
        scale: 1.0,
    };
    let centers: Vec<Vector3<f64>> = cams.iter().map(|c| sim.apply_point(&c.center())).collect();
    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let mean_dist = centers.iter().map(|c| (c - centroid).norm()).sum::<f64>() / centers.len() as f64;
    if mean_dist > 1e-12 {
        sim.scale = 1.0 / mean_dist;
    }
    let out = cams.iter().map(|c| sim.apply(c)).collect();
    Ok((out, sim))
}
