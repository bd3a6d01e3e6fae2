use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{normalize_poses, Camera};
use crate::model::{ArchVariant, Featurizer, Model, Net};
use crate::tensor::optim::AdamW;
use crate::tensor::{Array, Scalar, Tape, Tensor};

use super::loss::compute_loss;

/// Context and targets of one scene, all cameras in the frame normalized
/// on the context cameras.
#[derive(Debug, Clone)]
pub struct SceneBatch<T> {
    pub context: Vec<Array<T>>,
    pub context_cams: Vec<Camera>,
    pub targets: Vec<Array<T>>,
    pub target_cams: Vec<Camera>,
}

impl<T: Scalar> SceneBatch<T> {
    /// Normalizes world-frame cameras on the context set.
    pub fn from_world(context: Vec<Array<T>>, context_cams: &[Camera], targets: Vec<Array<T>>, target_cams: &[Camera]) -> Result<Self> {
        if context.len() != context_cams.len() || targets.len() != target_cams.len() {
            return Err(Error::Invalid("image and camera counts differ".into()));
        }
        let (norm, transform) = normalize_poses(context_cams)?;
        Ok(SceneBatch {
            context,
            context_cams: norm,
            targets,
            target_cams: target_cams.iter().map(|c| transform.apply(c)).collect(),
        })
    }
}

/// Scalar summary of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    pub percep: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Mean loss over every target of every scene, taped against fresh leaves
/// for all parameters. Returns the loss parts and the tape handles.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &Tape<T>,
    batch: &[SceneBatch<T>],
    lambda: f64,
    percep: &Featurizer<T>,
) -> Result<(Tensor<T>, f64, f64, BTreeMap<String, Tensor<T>>)> {
    let params: BTreeMap<String, Tensor<T>> = model
        .weights
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(v.clone())))
        .collect();
    let net = Net::new(&model.cfg, &params, model.prior.as_ref())?;
    let n: usize = batch.iter().map(|s| s.targets.len()).sum();
    if n == 0 {
        return Err(Error::Invalid("batch has no targets".into()));
    }
    let mut terms = Vec::with_capacity(n);
    let (mut mse, mut per) = (0.0, 0.0);
    for scene in batch {
        let kv = match model.cfg.arch_variant {
            ArchVariant::KvCache => Some(net.reconstruct(&scene.context, &scene.context_cams, false)?),
            ArchVariant::ConcatBaseline => None,
        };
        for (gt, cam) in scene.targets.iter().zip(&scene.target_cams) {
            let pred = match &kv {
                Some(kv) => net.render(kv, cam)?,
                None => net.concat_forward(&scene.context, &scene.context_cams, cam)?,
            };
            let parts = compute_loss(&pred, &Tensor::constant(gt.clone()), lambda, percep)?;
            mse += parts.mse;
            per += parts.percep;
            terms.push(parts.total);
        }
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    let scale = 1.0 / n as f64;
    Ok((total.scale(T::from_f64(scale))?, mse * scale, per * scale, params))
}

/// Forward, backward, global-norm clipping and one AdamW update.
///
/// Aborts before touching the weights if the loss or any gradient is not
/// finite.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[SceneBatch<T>],
    lr: f64,
    lambda: f64,
    percep: &Featurizer<T>,
    clip: f64,
) -> Result<StepStats> {
    let tape = Tape::new();
    let (loss, mse, per, params) = batch_loss(model, &tape, batch, lambda, percep)?;
    let loss_v = loss.value().item().as_f64();
    if !loss_v.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss_v} (mse {mse}, percep {per}) at optimizer step {}",
            opt.step + 1
        )));
    }
    tape.backward(&loss)?;
    let mut grads = BTreeMap::new();
    let mut sq = 0.0;
    for (name, leaf) in &params {
        if let Some(g) = tape.grad(leaf) {
            let s: f64 = g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name} at optimizer step {}", opt.step + 1)));
            }
            sq += s;
            grads.insert(name.clone(), g);
        }
    }
    let grad_norm = sq.sqrt();
    if clip > 0.0 && grad_norm > clip {
        let k = T::from_f64(clip / grad_norm);
        for g in grads.values_mut() {
            *g = g.map(|v| v * k);
        }
    }
    opt.step(&mut model.weights.params, &grads, lr)?;
    Ok(StepStats {
        loss: loss_v,
        mse,
        percep: per,
        grad_norm,
    })
}
