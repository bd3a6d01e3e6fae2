//! Procedural Lambertian sphere scenes with an analytic ray tracer.

mod dataset;
pub mod ppm;

pub use dataset::{make_dataset, orbit_cameras, DatasetConfig, Manifest, SceneData, SceneDataset, SceneEntry, Split, TARGET_STRIDE};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{pixel_rays, Camera};
use crate::tensor::Array;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Square checkerboard floor at `y = height`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundPlane {
    pub height: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
    pub cell: f64,
    /// Half side of the square floor centered under the origin.
    pub extent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub spheres: Vec<Sphere>,
    pub ground_plane: Option<GroundPlane>,
    /// Unit vector pointing toward the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub background: [f64; 3],
}

const MIN_SPHERES: usize = 3;
const MAX_SPHERES: usize = 8;
const PLACEMENT_TRIES: usize = 2000;
const HIT_EPS: f64 = 1e-9;

fn rgb(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Deterministic scene: 3–8 non-overlapping spheres inside the unit ball,
/// an optional checkered floor below it, and a directional light from above.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = rng.gen_range(MIN_SPHERES..=MAX_SPHERES);
    let mut spheres: Vec<Sphere> = Vec::with_capacity(want);
    for _ in 0..PLACEMENT_TRIES {
        if spheres.len() == want {
            break;
        }
        let radius = rng.gen_range(0.15..0.45);
        let c = loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() <= 1.0 {
                break v * (1.0 - radius);
            }
        };
        let clear = spheres
            .iter()
            .all(|s| (Vector3::from(s.center) - c).norm() > s.radius + radius);
        if clear {
            spheres.push(Sphere {
                center: [c.x, c.y, c.z],
                radius,
                albedo: rgb(&mut rng, 0.15, 0.95),
            });
        }
    }
    let ground_plane = rng.gen_bool(0.5).then(|| GroundPlane {
        height: -1.0,
        albedo_a: rgb(&mut rng, 0.5, 0.9),
        albedo_b: rgb(&mut rng, 0.1, 0.4),
        cell: 1.0,
        extent: 3.0,
    });
    let light = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.4..1.0), rng.gen_range(-1.0..1.0)).normalize();
    SceneSpec {
        seed,
        spheres,
        ground_plane,
        light_dir: [light.x, light.y, light.z],
        ambient: rng.gen_range(0.1..0.4),
        background: rgb(&mut rng, 0.05, 0.35),
    }
}

/// Nearest surface hit: distance, point, outward normal facing the ray, albedo.
pub fn intersect(spec: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, Vector3<f64>, [f64; 3])> {
    let mut best: Option<(f64, Vector3<f64>, Vector3<f64>, [f64; 3])> = None;
    for s in &spec.spheres {
        let c = Vector3::from(s.center);
        let oc = o - c;
        let b = oc.dot(d);
        let cc = oc.dot(&oc) - s.radius * s.radius;
        let disc = b * b - cc;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let t = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
        if t > HIT_EPS && best.as_ref().map_or(true, |h| t < h.0) {
            let p = o + d * t;
            best = Some((t, p, (p - c) / s.radius, s.albedo));
        }
    }
    if let Some(g) = &spec.ground_plane {
        if d.y.abs() > 1e-12 {
            let t = (g.height - o.y) / d.y;
            let p = o + d * t;
            let inside = p.x.abs() <= g.extent && p.z.abs() <= g.extent;
            if inside && t > HIT_EPS && best.as_ref().map_or(true, |h| t < h.0) {
                let parity = ((p.x / g.cell).floor() as i64 + (p.z / g.cell).floor() as i64).rem_euclid(2);
                let albedo = if parity == 0 { g.albedo_a } else { g.albedo_b };
                let n = if d.y < 0.0 { Vector3::y() } else { -Vector3::y() };
                best = Some((t, p, n, albedo));
            }
        }
    }
    best
}

/// Lambertian shade of the nearest hit, or the background on a miss.
/// No shadows and no secondary rays.
pub fn trace_ray(spec: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
    match intersect(spec, o, d) {
        None => spec.background,
        Some((_, _, n, albedo)) => {
            let lambert = n.dot(&Vector3::from(spec.light_dir)).max(0.0);
            let k = spec.ambient + (1.0 - spec.ambient) * lambert;
            [albedo[0] * k, albedo[1] * k, albedo[2] * k]
        }
    }
}

/// One ray per pixel center; `[3, H, W]` in `[0, 1]`.
pub fn render_ground_truth(spec: &SceneSpec, cam: &Camera, h: usize, w: usize) -> Result<Array<f32>> {
    let rays = pixel_rays(cam, h, w)?;
    let mut data = vec![0f32; 3 * h * w];
    for (i, (o, d)) in rays.origins.iter().zip(&rays.dirs).enumerate() {
        let c = trace_ray(spec, o, d);
        for ch in 0..3 {
            data[ch * h * w + i] = c[ch] as f32;
        }
    }
    Array::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::fnv1a64;

    fn one_sphere() -> SceneSpec {
        SceneSpec {
            seed: 0,
            spheres: vec![Sphere {
                center: [0.0, 0.0, 3.0],
                radius: 1.0,
                albedo: [0.2, 0.4, 0.6],
            }],
            ground_plane: None,
            light_dir: [0.0, 0.0, -1.0],
            ambient: 0.0,
            background: [0.1, 0.1, 0.1],
        }
    }

    #[test]
    fn quadratic_hit_by_hand() {
        let (t, p, n, _) = intersect(&one_sphere(), &Vector3::zeros(), &Vector3::z()).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!((p - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert!((n + Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn head_on_light_returns_albedo() {
        assert_eq!(trace_ray(&one_sphere(), &Vector3::zeros(), &Vector3::z()), [0.2, 0.4, 0.6]);
    }

    #[test]
    fn miss_is_background() {
        assert_eq!(trace_ray(&one_sphere(), &Vector3::zeros(), &-Vector3::z()), [0.1, 0.1, 0.1]);
    }

    #[test]
    fn scenes_are_seeded_and_valid() {
        assert_eq!(generate_scene(5), generate_scene(5));
        let mut hashes = std::collections::BTreeSet::new();
        for seed in 0..100 {
            let s = generate_scene(seed);
            hashes.insert(fnv1a64(serde_json::to_string(&s).unwrap().as_bytes()));
            assert!((MIN_SPHERES..=MAX_SPHERES).contains(&s.spheres.len()));
            for (i, a) in s.spheres.iter().enumerate() {
                assert!(Vector3::from(a.center).norm() + a.radius <= 1.0 + 1e-12);
                assert!(a.albedo.iter().all(|c| (0.0..=1.0).contains(c)));
                for b in &s.spheres[i + 1..] {
                    assert!((Vector3::from(a.center) - Vector3::from(b.center)).norm() > a.radius + b.radius);
                }
            }
            assert!((Vector3::from(s.light_dir).norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(hashes.len(), 100);
    }

    fn cam(eye: [f64; 3], size: usize) -> Camera {
        Camera::look_at(Vector3::from(eye), Vector3::zeros(), Vector3::y(), 50.0, size, size).unwrap()
    }

    #[test]
    fn single_pixel_is_principal_ray() {
        let spec = generate_scene(3);
        let c = cam([0.5, 1.2, -3.0], 1);
        let img = render_ground_truth(&spec, &c, 1, 1).unwrap();
        let expect = trace_ray(&spec, &c.center(), &c.view_dir());
        for ch in 0..3 {
            assert!((img.data()[ch] as f64 - expect[ch]).abs() < 1e-6);
        }
        assert_eq!(img, render_ground_truth(&spec, &c, 1, 1).unwrap());
    }

    #[test]
    fn downsampled_render_agrees_with_direct_render() {
        for seed in 0..10 {
            let spec = generate_scene(seed);
            let c = cam([2.0, 1.5, -2.0], 32);
            let big = render_ground_truth(&spec, &c, 64, 64).unwrap();
            let small = render_ground_truth(&spec, &c, 32, 32).unwrap();
            let mut err = 0.0;
            for ch in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let at = |yy: usize, xx: usize| big.data()[ch * 4096 + yy * 64 + xx] as f64;
                        let avg = (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1)) / 4.0;
                        err += (avg - small.data()[ch * 1024 + y * 32 + x] as f64).abs();
                    }
                }
            }
            assert!(err / 3072.0 <= 0.1, "seed {seed}: {}", err / 3072.0);
        }
    }

    #[test]
    fn multi_view_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let quant = |c: f64| (c * 255.0).round();
        for seed in 0..6 {
            let spec = generate_scene(seed);
            let on_sphere = |p: &Vector3<f64>| {
                spec.spheres
                    .iter()
                    .any(|s| ((p - Vector3::from(s.center)).norm() - s.radius).abs() < 1e-9)
            };
            let a = cam([3.0, 1.0, 0.5], 32);
            let b = cam([-1.0, 2.0, 2.5], 32);
            let rays = pixel_rays(&a, 32, 32).unwrap();
            let mut checked = 0;
            for _ in 0..100_000 {
                if checked == 100 {
                    break;
                }
                let i = rng.gen_range(0..rays.dirs.len());
                let Some((_, p, _, _)) = intersect(&spec, &rays.origins[i], &rays.dirs[i]) else { continue };
                if !on_sphere(&p) || b.project(&p).is_none() {
                    continue;
                }
                let to = p - b.center();
                let dir = to.normalize();
                match intersect(&spec, &b.center(), &dir) {
                    Some((t, _, _, _)) if (t - to.norm()).abs() < 1e-7 => {
                        let ca = trace_ray(&spec, &rays.origins[i], &rays.dirs[i]);
                        let cb = trace_ray(&spec, &b.center(), &dir);
                        for ch in 0..3 {
                            assert!((quant(ca[ch]) - quant(cb[ch])).abs() <= 1.0, "seed {seed}");
                        }
                        checked += 1;
                    }
                    _ => {}
                }
            }
            assert_eq!(checked, 100, "seed {seed}: too few co-visible sphere points");
        }
    }
}
