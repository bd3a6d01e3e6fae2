//! Invariant checks shared by `selftest` and the acceptance suite. Each
//! returns the measured quantity; callers own the tolerances.

use std::collections::BTreeMap;

use dvsm::geometry::{normalize_poses, Camera};
use dvsm::model::{BlockVariant, Decouple, Model, ModelConfig, Net, PriorKind};
use dvsm::tensor::gradcheck::grad_check;
use dvsm::tensor::{nn, Array, Scalar, Tensor};
use dvsm::train::init_weights;
use dvsm::Result;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DECOUPLE_FLAGS: [Decouple; 5] = [
    Decouple::InputProj,
    Decouple::IntraAttn,
    Decouple::CrossQo,
    Decouple::Ffn,
    Decouple::EntireDecoder,
];

pub fn orbit_cams(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    (0..n)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let e: f64 = rng.gen_range(0.2..0.8);
            let r: f64 = rng.gen_range(2.5..3.5);
            let eye = Vector3::new(r * e.cos() * a.cos(), r * e.sin(), r * e.cos() * a.sin());
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 50.0, size, size).expect("valid orbit camera")
        })
        .collect()
}

pub fn random_images<T: Scalar>(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Array<T>> {
    (0..n)
        .map(|_| Array::from_fn(&[3, size, size], |_| T::from_f64(rng.gen_range(0.0..1.0))))
        .collect()
}

/// Initialized weights, amplified so every path visibly moves the output.
pub fn lively_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut w = init_weights::<T>(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, a) in w.params.iter_mut() {
        if name.contains(".ln.") || name.contains("_gain") {
            let d = a.data().to_vec();
            *a = Array::from_fn(a.shape(), |i| d[i] + T::from_f64(rng.gen_range(-0.3..0.3)));
        } else {
            *a = a.map(|v| v * T::from_f64(5.0));
        }
    }
    Model::new(cfg.clone(), w)
}

/// Micro-config `i` of a sweep. The first six cover each decoupling flag
/// alone and the intra-view-only reconstruction variant.
pub fn micro_config(i: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(i);
    let mut cfg = ModelConfig::new(8, rng.gen_range(1..3), 2, [2, 4][rng.gen_range(0..2)], [2, 4][rng.gen_range(0..2)]);
    match i {
        0..=4 => {
            cfg.decouple.insert(DECOUPLE_FLAGS[i as usize]);
        }
        5 => cfg.recon_cross_view = false,
        _ => {
            cfg.decouple = DECOUPLE_FLAGS.iter().filter(|_| rng.gen_bool(0.3)).copied().collect();
            cfg.recon_cross_view = rng.gen_bool(0.7);
            cfg.block_variant = [BlockVariant::Full, BlockVariant::NoMidFfn, BlockVariant::NoIntra][rng.gen_range(0..3)];
        }
    }
    cfg
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

fn probe(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = Tensor::constant(rand_array(&mut rng, y.shape()));
    y.mul(&w)?.sum()
}

type Primitive = (&'static str, Vec<Vec<usize>>, fn(&[Tensor<f64>], u64) -> Result<Tensor<f64>>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("add/sub/mul", vec![vec![2, 3], vec![3]], |x, s| probe(&x[0].mul(&x[1])?.sub(&x[1])?.add(&x[0])?, s)),
        ("scale/sigmoid", vec![vec![6]], |x, s| probe(&x[0].sigmoid()?.scale(3.0)?.add_scalar(0.5)?, s)),
        ("square/mean", vec![vec![6]], |x, _| x[0].square()?.mean()),
        ("matmul", vec![vec![2, 3, 4], vec![4, 2]], |x, s| probe(&x[0].matmul(&x[1])?, s)),
        ("gelu", vec![vec![6]], |x, s| probe(&nn::gelu(&x[0])?, s)),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |x, s| {
            probe(&nn::layer_norm(&x[0], &x[1], &x[2], nn::LAYER_NORM_EPS)?, s)
        }),
        ("l2_normalize", vec![vec![3, 4]], |x, s| probe(&nn::l2_normalize(&x[0], nn::L2_NORM_EPS)?, s)),
        ("softmax", vec![vec![3, 4]], |x, s| probe(&nn::softmax(&x[0])?, s)),
        ("attention", vec![vec![2, 2, 3, 4], vec![2, 2, 5, 4], vec![2, 2, 5, 3], vec![2]], |x, s| {
            let scale = x[3].add_scalar(2.0)?;
            probe(&nn::attention(&x[0], &x[1], &x[2], &scale, &nn::AttentionOpts::default())?, s)
        }),
        ("patchify/unpatchify", vec![vec![3, 4, 4]], |x, s| {
            probe(&nn::unpatchify(&nn::patchify(&x[0], 2)?, 3, 2, 2, 2)?, s)
        }),
        ("heads/reshape/permute", vec![vec![6, 4]], |x, s| {
            probe(&nn::merge_heads(&nn::split_heads(&x[0], 2, 2)?)?.reshape(&[4, 6])?.permute(&[1, 0])?, s)
        }),
        ("slice/concat/transpose", vec![vec![4, 3], vec![2, 3]], |x, s| {
            probe(&Tensor::concat0(&[x[0].slice0(1, 3)?, x[1].clone()])?.transpose()?, s)
        }),
    ]
}

/// Worst relative error over every primitive and `seeds` random inputs,
/// with the name of the worst primitive.
pub fn primitive_grad_error(seeds: u64) -> Result<(f64, &'static str)> {
    let mut worst = (0.0, "");
    for (name, shapes, f) in primitives() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Array<f64>> = shapes.iter().map(|s| rand_array(&mut rng, s)).collect();
            let r = grad_check(|x| f(x, seed), &inputs, 1e-5)?;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, name);
            }
        }
    }
    Ok(worst)
}

/// Relative error of the full micro-model (D=8, L=1, heads=2, p=2,
/// two 8×8 views) with respect to every parameter.
pub fn micro_model_grad_error(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::new(8, 1, 2, 2, 2);
    let m = lively_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let cams = orbit_cams(3, 8, &mut rng);
    let imgs = random_images::<f64>(2, 8, &mut rng);
    let names: Vec<String> = m.weights.params.keys().cloned().collect();
    let inputs: Vec<Array<f64>> = m.weights.params.values().cloned().collect();
    let (norm, tr) = normalize_poses(&cams[..2])?;
    let target = tr.apply(&cams[2]);
    let readout = Array::from_fn(&[3, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let f = |leaves: &[Tensor<f64>]| {
        let params: BTreeMap<String, Tensor<f64>> = names.iter().cloned().zip(leaves.iter().cloned()).collect();
        let net = Net::new(&cfg, &params, None)?;
        let kv = net.reconstruct(&imgs, &norm, false)?;
        net.render(&kv, &target)?.mul(&Tensor::constant(readout.clone()))?.sum()
    };
    Ok(grad_check(f, &inputs, 1e-5)?.max_rel_err)
}

/// Largest max-abs gap between cached rendering and the recompute oracle
/// over `configs` micro-configs in f32.
pub fn cache_equivalence(configs: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..configs {
        let cfg = micro_config(i);
        let m = lively_model::<f32>(&cfg, i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i + 1000);
        let v = rng.gen_range(1..4);
        let cams = orbit_cams(v + 1, 8, &mut rng);
        let imgs = random_images::<f32>(v, 8, &mut rng);
        let cached = m.render(&m.reconstruct(&imgs, &cams[..v])?, &cams[v])?;
        let oracle = m.render_recompute_oracle(&imgs, &cams[..v], &cams[v])?;
        worst = worst.max(cached.max_abs_diff(&oracle)? as f64);
    }
    Ok(worst)
}

/// Largest render change over `perms` random permutations of the
/// (normalized) context for each of `configs` configs, in f32.
pub fn permutation_invariance(configs: u64, perms: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..configs {
        let cfg = micro_config(100 + i);
        let m = lively_model::<f32>(&cfg, i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i + 2000);
        let v = 4;
        let cams = orbit_cams(v + 1, 8, &mut rng);
        let imgs = random_images::<f32>(v, 8, &mut rng);
        let (norm, tr) = normalize_poses(&cams[..v])?;
        let base = m.render(&m.reconstruct_normalized(&imgs, &norm, tr.clone())?, &cams[v])?;
        let mut order: Vec<usize> = (0..v).collect();
        for _ in 0..perms {
            order.shuffle(&mut rng);
            let pc: Vec<Camera> = order.iter().map(|&j| norm[j].clone()).collect();
            let pi: Vec<Array<f32>> = order.iter().map(|&j| imgs[j].clone()).collect();
            let out = m.render(&m.reconstruct_normalized(&pi, &pc, tr.clone())?, &cams[v])?;
            worst = worst.max(base.max_abs_diff(&out)? as f64);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Default)]
pub struct SharingReport {
    /// Shared parameters whose perturbation left one stage unchanged.
    pub shared_failures: Vec<String>,
    pub shared_checked: usize,
    /// Reconstruction copies whose perturbation moved a cache-fixed render.
    pub decoupled_failures: Vec<String>,
    pub decoupled_checked: usize,
}

/// Perturbs single parameters: with no decoupling every parameter used by
/// both stages must move both; with `entire_decoder`, perturbing a
/// reconstruction copy must leave a render from a fixed cache bitwise equal.
pub fn weight_sharing() -> Result<SharingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cams = orbit_cams(3, 8, &mut rng);
    let imgs = random_images::<f64>(2, 8, &mut rng);
    let mut report = SharingReport::default();

    let cfg = ModelConfig::new(8, 2, 2, 2, 2);
    let m = lively_model::<f64>(&cfg, 3)?;
    let cache = m.reconstruct(&imgs, &cams[..2])?;
    let fixed = m.render(&cache, &cams[2])?;
    let hidden = m.reconstruct_hidden(&imgs, &cams[..2])?;
    let recon_only = ["embed.rgb", ".cross.wk", ".cross.wv"];
    let rend_only = ["head."];
    for name in m.weights.params.keys() {
        if recon_only.iter().chain(&rend_only).any(|p| name.contains(p)) {
            continue;
        }
        let mut w = m.weights.clone();
        let a = w.params.get_mut(name).expect("present");
        *a = a.map(|v| v * 1.5 + 0.01);
        let pm = Model::new(cfg.clone(), w)?;
        report.shared_checked += 1;
        let recon_moved = pm.reconstruct_hidden(&imgs, &cams[..2])? != hidden;
        let rend_moved = pm.render(&cache, &cams[2])? != fixed;
        if !(recon_moved && rend_moved) {
            report.shared_failures.push(name.clone());
        }
    }

    let cfg = ModelConfig::new(8, 2, 2, 2, 2).with_decouple(&[Decouple::EntireDecoder]);
    let m = lively_model::<f64>(&cfg, 4)?;
    let cache = m.reconstruct(&imgs, &cams[..2])?;
    let fixed = m.render(&cache, &cams[2])?;
    for name in m.weights.params.keys().filter(|n| n.ends_with(".recon")) {
        let mut w = m.weights.clone();
        let a = w.params.get_mut(name).expect("present");
        *a = a.map(|v| v * 1.5 + 0.01);
        let pm = Model::new(cfg.clone(), w)?;
        report.decoupled_checked += 1;
        if pm.render(&cache, &cams[2])? != fixed {
            report.decoupled_failures.push(name.clone());
        }
    }
    Ok(report)
}

/// Reconstruction and rendering query-token totals at `size`×`size` for one
/// view and one target.
pub fn token_counts(p1: usize, p2: usize, size: usize) -> Result<(usize, usize)> {
    let cfg = ModelConfig::new(8, 1, 2, p1, p2);
    let m = Model::<f32>::new(cfg.clone(), init_weights(&cfg, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cams = orbit_cams(2, size, &mut rng);
    let imgs = random_images::<f32>(1, size, &mut rng);
    let (recon, grid) = m.with_net(|net| net.embed_recon(&imgs, &cams[..1]))?;
    let _ = grid;
    let (rend, _) = m.with_net(|net| net.embed_rend(&cams[1]))?;
    Ok((recon.shape()[0], rend.shape()[0]))
}

/// Rendering-stage op traces with the prior off and on.
pub fn prior_render_traces() -> Result<(dvsm::model::StageTrace, dvsm::model::StageTrace)> {
    let cfg = ModelConfig::new(8, 2, 2, 2, 2);
    let mut with_prior = cfg.clone();
    with_prior.prior.kind = PriorKind::RandomFeaturizer;
    with_prior.prior.dim = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cams = orbit_cams(3, 8, &mut rng);
    let imgs = random_images::<f32>(2, 8, &mut rng);
    let off = Model::<f32>::new(cfg.clone(), init_weights(&cfg, 0))?.trace(&imgs, &cams[..2], &cams[2])?;
    let on = Model::<f32>::new(with_prior.clone(), init_weights(&with_prior, 0))?.trace(&imgs, &cams[..2], &cams[2])?;
    Ok((off.rend, on.rend))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_covers_every_flag_and_the_intra_only_variant() {
        for (i, f) in DECOUPLE_FLAGS.iter().enumerate() {
            assert!(micro_config(i as u64).decouple.contains(f));
        }
        assert!(!micro_config(5).recon_cross_view);
    }

    #[test]
    fn quick_invariants_hold() {
        assert!(primitive_grad_error(2).unwrap().0 <= 1e-6);
        assert!(cache_equivalence(8).unwrap() <= 1e-5);
        assert!(permutation_invariance(2, 3).unwrap() <= 1e-5);
    }

    #[test]
    fn stage_patch_sizes_set_token_counts() {
        let (r16_8, q16_8) = token_counts(16, 8, 64).unwrap();
        let (r16, q16) = token_counts(16, 16, 64).unwrap();
        assert_eq!(r16_8, r16);
        assert_eq!(q16_8, 4 * q16);
    }
}
