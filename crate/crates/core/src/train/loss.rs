use crate::error::{Error, Result};
use crate::model::Featurizer;
use crate::tensor::{Scalar, Tensor};

/// Seed of the frozen featurizer behind the perceptual term.
pub const PERCEP_SEED: u64 = 0x7065_7263_6570;
pub const PERCEP_DIM: usize = 32;

/// Frozen random featurizer used as the perceptual feature extractor for
/// images rendered at patch size `patch`.
pub fn perceptual_featurizer<T: Scalar>(patch: usize) -> Featurizer<T> {
    Featurizer::random(patch, PERCEP_DIM, PERCEP_SEED)
}

/// Differentiable total plus the values of both components.
#[derive(Debug, Clone)]
pub struct LossParts<T: Scalar> {
    pub total: Tensor<T>,
    pub mse: f64,
    pub percep: f64,
}

/// `MSE(pred, gt) + λ·mean‖F(pred) − F(gt)‖²` over featurizer tokens.
///
/// With `λ = 0` the perceptual term is still evaluated for logging but is
/// kept off the tape.
pub fn compute_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, lambda: f64, featurizer: &Featurizer<T>) -> Result<LossParts<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("compute_loss", pred.shape(), gt.shape()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("perceptual weight {lambda} must be non-negative")));
    }
    let mse = pred.sub(gt)?.square()?.mean()?;
    let gt_feat = featurizer.apply(&gt.detach())?;
    let (total, percep) = if lambda == 0.0 {
        let p = featurizer.apply(&pred.detach())?.sub(&gt_feat)?.square()?.mean()?;
        (mse.clone(), p.value().item().as_f64())
    } else {
        let p = featurizer.apply(pred)?.sub(&gt_feat)?.square()?.mean()?;
        let v = p.value().item().as_f64();
        (mse.add(&p.scale(T::from_f64(lambda))?)?, v)
    };
    Ok(LossParts {
        mse: mse.value().item().as_f64(),
        percep,
        total,
    })
}
