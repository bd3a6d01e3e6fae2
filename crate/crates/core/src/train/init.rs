use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{param_specs, weights::Init, ModelConfig, WeightBundle};
use crate::tensor::{Array, Scalar};

pub const INIT_STD: f64 = 0.02;
/// Truncation point in standard deviations.
pub const INIT_TRUNC: f64 = 2.0;

/// Fresh parameters: truncated-normal linear weights, unit LayerNorm gains,
/// zero shifts, and query/key logit gains whose product is `√(D/heads)`.
pub fn init_weights<T: Scalar>(cfg: &ModelConfig, seed: u64) -> WeightBundle<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = (cfg.head_dim() as f64).powf(0.25);
    let mut params = BTreeMap::new();
    for spec in param_specs(cfg) {
        let a = match spec.init {
            Init::Ones => Array::ones(&spec.shape),
            Init::Zeros => Array::zeros(&spec.shape),
            Init::Gain => Array::full(&spec.shape, T::from_f64(gain)),
            Init::Normal => Array::from_fn(&spec.shape, |_| loop {
                let z: f64 = StandardNormal.sample(&mut rng);
                if z.abs() <= INIT_TRUNC {
                    break T::from_f64(z * INIT_STD);
                }
            }),
        };
        params.insert(spec.name, a);
    }
    WeightBundle::new(params)
}
