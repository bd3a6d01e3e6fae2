use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Camera;
use crate::model::{Decouple, Model, ModelConfig, Net};
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::{Array, Tape, Tensor};

fn cams(n: usize, size: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let a = i as f64 * 0.4;
            let eye = Vector3::new(3.0 * a.cos(), 1.0, 3.0 * a.sin());
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 50.0, size, size).unwrap()
        })
        .collect()
}

fn batch(seed: u64, ctx: usize, tgt: usize, size: usize) -> SceneBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = || Array::from_fn(&[3, size, size], |_| rng.gen_range(0.0..1.0f32));
    let context: Vec<_> = (0..ctx).map(|_| img()).collect();
    let targets: Vec<_> = (0..tgt).map(|_| img()).collect();
    let all = cams(ctx + tgt, size);
    SceneBatch::from_world(context, &all[..ctx], targets, &all[ctx..]).unwrap()
}

fn micro(cfg: &ModelConfig, seed: u64) -> Model<f32> {
    Model::new(cfg.clone(), init_weights(cfg, seed)).unwrap()
}

#[test]
fn zero_lr_leaves_weights_bitwise() {
    let cfg = ModelConfig::new(16, 1, 2, 4, 4);
    let mut m = micro(&cfg, 1);
    let before = m.weights.clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    let f = perceptual_featurizer(4);
    let s = train_step(&mut m, &mut opt, &[batch(0, 2, 1, 8)], 0.0, 0.2, &f, 1.0).unwrap();
    assert!(s.loss.is_finite() && s.grad_norm > 0.0);
    assert_eq!(m.weights, before);
    assert_eq!(opt.step, 1);
}

#[test]
fn repeated_steps_fit_a_fixed_batch() {
    let cfg = ModelConfig::new(16, 1, 2, 4, 4);
    let mut m = micro(&cfg, 2);
    let mut opt = AdamW::new(AdamWConfig::default());
    let f = perceptual_featurizer(4);
    let b = [batch(3, 2, 1, 8)];
    let first = train_step(&mut m, &mut opt, &b, 3e-3, 0.0, &f, 1.0).unwrap().loss;
    let mut last = first;
    for _ in 0..99 {
        last = train_step(&mut m, &mut opt, &b, 3e-3, 0.0, &f, 1.0).unwrap().loss;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let cfg = ModelConfig::new(16, 1, 2, 4, 4);
    let mut m = micro(&cfg, 4);
    let mut b = batch(5, 2, 1, 8);
    b.targets[0] = Array::full(&[3, 8, 8], f32::NAN);
    let before = m.weights.clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    let err = train_step(&mut m, &mut opt, &[b], 1e-3, 0.0, &perceptual_featurizer(4), 1.0).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite(_)), "{err}");
    assert_eq!(m.weights, before);
}

#[test]
fn tiny_clip_threshold_still_updates_finitely() {
    let cfg = ModelConfig::new(16, 1, 2, 4, 4);
    let b = [batch(6, 2, 1, 8)];
    let f = perceptual_featurizer(4);
    let plain = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut m = micro(&cfg, 7);
    let s = train_step(&mut m, &mut AdamW::new(plain), &b, 1e-3, 0.0, &f, 1e-6).unwrap();
    assert!(s.grad_norm > 1e-6);
    assert!(m.weights.params.values().all(|a| a.all_finite()));
}

#[test]
fn init_forward_is_finite_with_bounded_logits() {
    let cfg = ModelConfig::new(32, 2, 4, 4, 4);
    for seed in 0..20 {
        let m = micro(&cfg, seed);
        let b = batch(seed, 2, 1, 16);
        let img = m
            .with_net(|net| {
                let kv = net.reconstruct(&b.context, &b.context_cams, false)?;
                Ok(net.render(&kv, &b.target_cams[0])?.into_value())
            })
            .unwrap();
        for &y in img.data() {
            let y = y as f64;
            assert!(y.is_finite() && y > 0.0 && y < 1.0);
            assert!((y / (1.0 - y)).ln().abs() < 50.0);
        }
    }
}

/// Gradients of `names` from the mean render loss; with `detach` the cache
/// is cut from the reconstruction graph before rendering.
fn grads(model: &Model<f64>, b: &SceneBatch<f64>, detach: bool, names: &[&str]) -> Vec<Option<Array<f64>>> {
    let tape = Tape::new();
    let params = model
        .weights
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(v.clone())))
        .collect();
    let net = Net::new(&model.cfg, &params, None).unwrap();
    let mut kv = net.reconstruct(&b.context, &b.context_cams, false).unwrap();
    if detach {
        kv.keys = kv.keys.iter().map(Tensor::detach).collect();
        kv.values = kv.values.iter().map(Tensor::detach).collect();
    }
    let pred = net.render(&kv, &b.target_cams[0]).unwrap();
    let loss = pred.sub(&Tensor::constant(b.targets[0].clone())).unwrap().square().unwrap().mean().unwrap();
    tape.backward(&loss).unwrap();
    names.iter().map(|n| tape.grad(&params[*n])).collect()
}

fn f64_batch(seed: u64) -> SceneBatch<f64> {
    let b = batch(seed, 2, 1, 8);
    SceneBatch {
        context: b.context.iter().map(Array::cast).collect(),
        context_cams: b.context_cams,
        targets: b.targets.iter().map(Array::cast).collect(),
        target_cams: b.target_cams,
    }
}

fn nonzero(g: &Option<Array<f64>>) -> bool {
    g.as_ref().is_some_and(|a| a.data().iter().any(|&v| v != 0.0))
}

#[test]
fn reconstruction_only_params_see_no_gradient_through_detached_cache() {
    let cfg = ModelConfig::new(16, 2, 2, 4, 4).with_decouple(&[Decouple::EntireDecoder]);
    let m = micro(&cfg, 8).cast::<f64>().unwrap();
    let b = f64_batch(9);
    let names = ["embed.rgb", "blocks.0.intra.wq.recon", "blocks.0.cross.wk", "blocks.0.intra.wq.rend"];
    let cut = grads(&m, &b, true, &names);
    assert!(!nonzero(&cut[0]) && !nonzero(&cut[1]) && !nonzero(&cut[2]));
    assert!(nonzero(&cut[3]));
    let full = grads(&m, &b, false, &names);
    assert!(full.iter().all(nonzero));
}

#[test]
fn shared_params_accumulate_from_both_branches() {
    let cfg = ModelConfig::new(16, 2, 2, 4, 4);
    let m = micro(&cfg, 10).cast::<f64>().unwrap();
    let b = f64_batch(11);
    let names = ["blocks.0.intra.wq", "blocks.1.intra_mlp.w1", "embed.ray"];
    let cut = grads(&m, &b, true, &names);
    let full = grads(&m, &b, false, &names);
    for (i, n) in names.iter().enumerate() {
        let (c, f) = (cut[i].as_ref().unwrap(), full[i].as_ref().unwrap());
        assert!(c.max_abs_diff(f).unwrap() > 1e-12, "{n}: recon branch contributes nothing");
        assert!(nonzero(&cut[i]), "{n}: render branch contributes nothing");
    }
}
