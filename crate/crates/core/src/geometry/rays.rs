use nalgebra::Vector3;

use super::Camera;
use crate::error::Result;
use crate::tensor::{Array, Scalar};

/// Per-pixel world-space rays, row-major over `(v, u)`.
#[derive(Debug, Clone)]
pub struct PixelRays {
    pub height: usize,
    pub width: usize,
    pub origins: Vec<Vector3<f64>>,
    pub dirs: Vec<Vector3<f64>>,
}

impl PixelRays {
    pub fn origins_array(&self) -> Array<f64> {
        flatten3(&self.origins, self.height, self.width)
    }

    pub fn dirs_array(&self) -> Array<f64> {
        flatten3(&self.dirs, self.height, self.width)
    }
}

fn flatten3(v: &[Vector3<f64>], h: usize, w: usize) -> Array<f64> {
    let data = v.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Array::new(&[h, w, 3], data).expect("ray buffer size")
}

/// Rays through the pixel centers of an `h × w` image. If `(h, w)` differs
/// from the camera's native size the intrinsics are rescaled to match.
pub fn pixel_rays(cam: &Camera, h: usize, w: usize) -> Result<PixelRays> {
    cam.check_intrinsics()?;
    let cam = if (cam.width, cam.height) == (w, h) {
        cam.clone()
    } else {
        cam.scaled_to(w, h)
    };
    let rot = cam.rotation();
    let origin = cam.center();
    let (fx, fy, cx, cy) = (cam.fx(), cam.fy(), cam.cx(), cam.cy());
    let mut dirs = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let local = Vector3::new((u as f64 + 0.5 - cx) / fx, (v as f64 + 0.5 - cy) / fy, 1.0);
            dirs.push((rot * local).normalize());
        }
    }
    Ok(PixelRays {
        height: h,
        width: w,
        origins: vec![origin; h * w],
        dirs,
    })
}

/// Per-pixel Plücker coordinates `(r_o × r_d, r_d)` stored `[H, W, 6]`.
#[derive(Debug, Clone)]
pub struct RayMap {
    pub data: Array<f64>,
}

impl RayMap {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    /// Channels-first `[6, H, W]` copy in the requested precision.
    pub fn channels_first<T: Scalar>(&self) -> Array<T> {
        let (h, w) = (self.height(), self.width());
        let src = self.data.data();
        Array::from_fn(&[6, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            T::from_f64(src[p * 6 + c])
        })
    }
}

pub fn plucker_map(cam: &Camera, h: usize, w: usize) -> Result<RayMap> {
    let rays = pixel_rays(cam, h, w)?;
    let mut data = Vec::with_capacity(h * w * 6);
    for (o, d) in rays.origins.iter().zip(&rays.dirs) {
        let m = o.cross(d);
        data.extend_from_slice(&[m.x, m.y, m.z, d.x, d.y, d.z]);
    }
    Ok(RayMap {
        data: Array::new(&[h, w, 6], data)?,
    })
}
