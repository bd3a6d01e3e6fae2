//! Camera math: rays, Plücker maps, pose normalization and view selection.

pub mod camera;
mod normalize;
mod rays;
mod views;

pub use camera::Camera;
pub use normalize::{normalize_poses, Similarity};
pub use rays::{pixel_rays, plucker_map, PixelRays, RayMap};
pub use views::{kmeans_detailed, kmeans_select_views, sample_context_target, KMeansRun, ViewSampling};

use crate::error::{Error, Result};
use crate::tensor::image::bilinear_resize;
use crate::tensor::{Array, Scalar};

/// `round(extent / p_i) · q`, rounding half away from zero.
pub fn receptive_extent(extent: usize, p_i: usize, q: usize) -> Result<usize> {
    if p_i == 0 || q == 0 {
        return Err(Error::Invalid("patch sizes must be positive".into()));
    }
    let out = (extent as f64 / p_i as f64).round() as usize * q;
    if out == 0 {
        return Err(Error::Invalid(format!("extent {extent} with patch {p_i} rounds to zero tokens")));
    }
    Ok(out)
}

/// Resizes a `[C, H, W]` map so that a `p_i` token grid becomes a `q` grid.
pub fn receptive_resize<T: Scalar>(img: &Array<T>, p_i: usize, q: usize) -> Result<Array<T>> {
    if img.rank() != 3 {
        return Err(Error::Invalid(format!("receptive_resize expects [C,H,W], got {:?}", img.shape())));
    }
    let h = receptive_extent(img.shape()[1], p_i, q)?;
    let w = receptive_extent(img.shape()[2], p_i, q)?;
    bilinear_resize(img, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Rotation3, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn receptive_sizes() {
        let img = Array::<f32>::zeros(&[3, 32, 32]);
        assert_eq!(receptive_resize(&img, 8, 16).unwrap().shape(), &[3, 64, 64]);
        assert_eq!(receptive_resize(&img, 4, 4).unwrap().shape(), &[3, 32, 32]);
        let img = Array::<f32>::zeros(&[3, 48, 48]);
        assert_eq!(receptive_resize(&img, 16, 16).unwrap().shape(), &[3, 48, 48]);
        assert_eq!(receptive_extent(40, 16, 16).unwrap(), 48);
        assert_eq!(receptive_extent(24, 16, 8).unwrap(), 16);
        assert!(receptive_extent(4, 16, 16).is_err());
    }

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = Rotation3::new(axis * rng.gen_range(0.0..3.0)).into_inner();
        let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let (w, h) = (rng.gen_range(2..9), rng.gen_range(2..9));
        Camera::new(
            &camera::rigid(&rot, &t),
            rng.gen_range(2.0..20.0),
            rng.gen_range(2.0..20.0),
            rng.gen_range(0.2..0.8) * w as f64,
            rng.gen_range(0.2..0.8) * h as f64,
            w,
            h,
        )
    }

    #[test]
    fn ray_maps_are_plucker_for_many_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let cam = random_camera(&mut rng);
            let map = plucker_map(&cam, cam.height, cam.width).unwrap();
            for px in map.data.data().chunks(6) {
                let m = Vector3::new(px[0], px[1], px[2]);
                let d = Vector3::new(px[3], px[4], px[5]);
                assert!((d.norm() - 1.0).abs() <= 1e-6);
                assert!(m.dot(&d).abs() <= 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_ray_maps_ignore_rigid_pretransform(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cams: Vec<Camera> = (0..3).map(|_| random_camera(&mut rng)).collect();
            let g = random_camera(&mut rng).pose_matrix();
            let moved: Vec<Camera> = cams.iter().map(|c| c.with_pose(&(g * c.pose_matrix()))).collect();
            let (a, _) = normalize_poses(&cams).unwrap();
            let (b, _) = normalize_poses(&moved).unwrap();
            for (ca, cb) in a.iter().zip(&b) {
                let ma = plucker_map(ca, ca.height, ca.width).unwrap();
                let mb = plucker_map(cb, cb.height, cb.width).unwrap();
                prop_assert!(ma.data.max_abs_diff(&mb.data).unwrap() <= 1e-5);
            }
        }
    }

    #[test]
    fn identity_pose_helper() {
        let c = Camera::new(&Matrix4::identity(), 1.0, 1.0, 0.5, 0.5, 1, 1);
        assert_eq!(c.center(), Vector3::zeros());
    }
}
