use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Decouple, ModelConfig, PriorKind, MLP_RATIO};
use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Recon,
    Rend,
}

impl Stage {
    pub fn suffix(self) -> &'static str {
        match self {
            Stage::Recon => "recon",
            Stage::Rend => "rend",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal linear weight.
    Normal,
    Ones,
    Zeros,
    /// Per-head logit gain; the query and key gains multiply to `√dh`.
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

enum Group {
    Dec(Decouple),
    /// Cross-attention LayerNorm and gains: split only with the entire decoder.
    CrossNorm,
    Exclusive,
}

fn group_of(base: &str) -> Group {
    if base == "embed.ray" || base.starts_with("embed.ln.") {
        Group::Dec(Decouple::InputProj)
    } else if base.contains(".intra.") {
        Group::Dec(Decouple::IntraAttn)
    } else if base.ends_with(".cross.wq") || base.ends_with(".cross.wo") {
        Group::Dec(Decouple::CrossQo)
    } else if base.contains(".cross.ln.") || base.ends_with("_gain") {
        Group::CrossNorm
    } else if base.contains("_mlp.") {
        Group::Dec(Decouple::Ffn)
    } else {
        Group::Exclusive
    }
}

/// Whether `base` has separate per-stage copies under `cfg`.
pub fn is_decoupled(cfg: &ModelConfig, base: &str) -> bool {
    match group_of(base) {
        Group::Dec(g) => cfg.covers(g),
        Group::CrossNorm => cfg.decouple.contains(&Decouple::EntireDecoder),
        Group::Exclusive => false,
    }
}

/// Store name of `base` as seen by `stage`.
pub fn resolve(cfg: &ModelConfig, stage: Stage, base: &str) -> String {
    if is_decoupled(cfg, base) {
        format!("{base}.{}", stage.suffix())
    } else {
        base.to_string()
    }
}

fn base_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, h, q, p2) = (cfg.dim, cfg.heads, cfg.q(), cfg.p2);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        push(format!("{prefix}.ln.gamma"), vec![d], Init::Ones);
        push(format!("{prefix}.ln.beta"), vec![d], Init::Zeros);
    };
    push("embed.ray".into(), vec![6 * q * q, d], Init::Normal);
    push("embed.rgb".into(), vec![3 * q * q, d], Init::Normal);
    ln(&mut push, "embed");
    for i in 0..cfg.layers {
        let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), kind: &str| {
            let pre = format!("blocks.{i}.{kind}");
            ln(push, &pre);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{pre}.{w}"), vec![d, d], Init::Normal);
            }
            push(format!("{pre}.q_gain"), vec![h], Init::Gain);
            push(format!("{pre}.k_gain"), vec![h], Init::Gain);
        };
        let mlp = |push: &mut dyn FnMut(String, Vec<usize>, Init), kind: &str| {
            let pre = format!("blocks.{i}.{kind}");
            ln(push, &pre);
            push(format!("{pre}.w1"), vec![d, MLP_RATIO * d], Init::Normal);
            push(format!("{pre}.w2"), vec![MLP_RATIO * d, d], Init::Normal);
        };
        if cfg.has_intra() {
            attn(&mut push, "intra");
            if cfg.has_mid_ffn() {
                mlp(&mut push, "intra_mlp");
            }
        }
        attn(&mut push, "cross");
        mlp(&mut push, "cross_mlp");
    }
    ln(&mut push, "head");
    push("head.out".into(), vec![d, 3 * p2 * p2], Init::Normal);
    if cfg.prior.enabled() {
        let f = cfg.prior.dim;
        push("prior.proj".into(), vec![f, d], Init::Normal);
        if cfg.prior.tunable && cfg.prior.kind == PriorKind::RandomFeaturizer {
            let s = q / 2;
            push("prior.w1".into(), vec![3 * s * s, f], Init::Normal);
            push("prior.w2".into(), vec![4 * f, f], Init::Normal);
        }
    }
    out
}

/// Every stored parameter, with per-stage copies expanded.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for spec in base_specs(cfg) {
        if is_decoupled(cfg, &spec.name) {
            for stage in [Stage::Recon, Stage::Rend] {
                out.push(ParamSpec {
                    name: format!("{}.{}", spec.name, stage.suffix()),
                    ..spec.clone()
                });
            }
        } else {
            out.push(spec);
        }
    }
    out
}

/// Named parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle<T> {
    pub params: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> WeightBundle<T> {
    pub fn new(params: BTreeMap<String, Array<T>>) -> Self {
        WeightBundle { params }
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn resolve(&self, cfg: &ModelConfig, stage: Stage, base: &str) -> Result<&Array<T>> {
        self.get(&resolve(cfg, stage, base))
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> WeightBundle<U> {
        WeightBundle {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks names and shapes against the layout `cfg` expects.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.params.len() {
            return Err(Error::Config(format!(
                "weight bundle has {} tensors, config expects {}",
                self.params.len(),
                specs.len()
            )));
        }
        for s in &specs {
            let a = self.get(&s.name)?;
            if a.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!("parameter {} has shape {:?}, expected {:?}", s.name, a.shape(), s.shape)));
            }
        }
        Ok(())
    }
}
