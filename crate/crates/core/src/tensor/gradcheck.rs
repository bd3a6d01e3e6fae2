//! Central finite-difference verification of tape gradients.

use super::{Array, Tape, Tensor};
use crate::error::{Error, Result};

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Result of [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps`, element by element.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn grad_check<F>(f: F, inputs: &[Array<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::<f64>::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let loss = f(&leaves)?;
    tape.backward(&loss)?;
    let analytic: Vec<Array<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(leaf, a)| tape.grad(leaf).unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let eval = |vals: &[Array<f64>]| -> Result<f64> {
        let consts: Vec<Tensor<f64>> = vals.iter().cloned().map(Tensor::constant).collect();
        let out = f(&consts)?;
        if out.value().len() != 1 {
            return Err(Error::Autodiff("grad_check needs a scalar function".into()));
        }
        Ok(out.value().item())
    };

    let mut best = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut vals: Vec<Array<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = input.to_vec();
            plus[j] += eps;
            vals[i] = Array::new(input.shape(), plus)?;
            let fp = eval(&vals)?;
            let mut minus = input.to_vec();
            minus[j] -= eps;
            vals[i] = Array::new(input.shape(), minus)?;
            let fm = eval(&vals)?;
            vals[i] = input.clone();

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > best.max_rel_err || !rel.is_finite() {
                best = GradCheck {
                    max_rel_err: rel,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        Array::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    /// `Σ w ⊙ y` with fixed random weights so no gradient is trivially zero.
    fn probe(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let w = Tensor::constant(rand_array(&mut rng, y.shape()));
        y.mul(&w)?.sum()
    }

    const PRIMITIVE_TOL: f64 = 1e-6;
    const EPS: f64 = 1e-5;
    const SEEDS: u64 = 100;

    fn check_seeds(shapes: &[&[usize]], f: impl Fn(&[Tensor<f64>], u64) -> Result<Tensor<f64>>) {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Array<f64>> = shapes.iter().map(|s| rand_array(&mut rng, s)).collect();
            let r = grad_check(|x| f(x, seed), &inputs, EPS).unwrap();
            assert!(r.max_rel_err <= PRIMITIVE_TOL, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn loss_gradients_by_hand() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let loss = x.square().unwrap().sum().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, 4.0]);

        let tape = Tape::<f64>::new();
        let x = tape.param(Array::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        tape.backward(&x.sum().unwrap()).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(tape.backward(&x.scale(2.0).unwrap()).is_err(), "non-scalar");
        let detached = Tensor::constant(Array::scalar(1.0));
        assert!(tape.backward(&detached).is_err());
        let loss = x.sum().unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err(), "second backward");
    }

    #[test]
    fn diamond_accumulates() {
        // f = Σ (x ⊙ sigmoid(x)), x used twice.
        check_seeds(&[&[5]], |x, _| x[0].mul(&x[0].sigmoid()?)?.sum());
        let tape = Tape::<f64>::new();
        let x = tape.param(Array::from_f64(&[1], &[3.0]).unwrap());
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matmul_gradients() {
        check_seeds(&[&[3, 4], &[4, 2]], |x, s| probe(&x[0].matmul(&x[1])?, s));
        check_seeds(&[&[2, 3, 4], &[4, 2]], |x, s| probe(&x[0].matmul(&x[1])?, s));
    }

    #[test]
    fn linear_layer() {
        check_seeds(&[&[5, 3], &[3, 4], &[4]], |x, s| probe(&x[0].matmul(&x[1])?.add(&x[2])?, s));
    }

    #[test]
    fn elementwise_gradients() {
        check_seeds(&[&[2, 3], &[3]], |x, s| probe(&x[0].mul(&x[1])?.sub(&x[1])?, s));
        check_seeds(&[&[6]], |x, s| probe(&x[0].sigmoid()?.scale(3.0)?.add_scalar(0.5)?, s));
        check_seeds(&[&[6]], |x, s| probe(&nn::gelu(&x[0])?, s));
        check_seeds(&[&[6]], |x, _| x[0].square()?.mean());
    }

    #[test]
    fn normalization_gradients() {
        check_seeds(&[&[3, 5], &[5], &[5]], |x, s| {
            probe(&nn::layer_norm(&x[0], &x[1], &x[2], nn::LAYER_NORM_EPS)?, s)
        });
        check_seeds(&[&[3, 4]], |x, s| probe(&nn::l2_normalize(&x[0], nn::L2_NORM_EPS)?, s));
        check_seeds(&[&[3, 4]], |x, s| probe(&nn::softmax(&x[0])?, s));
    }

    #[test]
    fn attention_gradients() {
        let shapes: [&[usize]; 4] = [&[2, 2, 3, 4], &[2, 2, 5, 4], &[2, 2, 5, 3], &[2]];
        check_seeds(&shapes, |x, s| {
            let scale = x[3].add_scalar(2.0)?;
            probe(&nn::attention(&x[0], &x[1], &x[2], &scale, &nn::AttentionOpts::default())?, s)
        });
        check_seeds(&shapes, |x, s| {
            let opts = nn::AttentionOpts {
                qk_norm: false,
                mask: Some(Array::from_fn(&[3, 5], |i| if i % 4 == 1 { -1e9 } else { 0.0 })),
            };
            probe(&nn::attention(&x[0], &x[1], &x[2], &x[3], &opts)?, s)
        });
    }

    #[test]
    fn shape_op_gradients() {
        check_seeds(&[&[2, 4, 6]], |x, s| probe(&nn::patchify(&x[0], 2)?, s));
        check_seeds(&[&[4, 12]], |x, s| probe(&nn::unpatchify(&x[0], 3, 2, 2, 2)?, s));
        check_seeds(&[&[6, 4]], |x, s| probe(&nn::split_heads(&x[0], 2, 2)?, s));
        check_seeds(&[&[4, 3], &[2, 3]], |x, s| {
            probe(&Tensor::concat0(&[x[0].slice0(1, 3)?, x[1].clone()])?.transpose()?, s)
        });
    }
}
