use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Groups of parameters that can be given separate reconstruction and
/// rendering copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decouple {
    InputProj,
    IntraAttn,
    CrossQo,
    Ffn,
    EntireDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    #[default]
    Full,
    /// Drops the MLP that follows intra-view attention.
    NoMidFfn,
    /// Drops intra-view attention together with its MLP.
    NoIntra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    #[default]
    KvCache,
    ConcatBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    #[default]
    None,
    RandomFeaturizer,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default)]
    pub kind: PriorKind,
    /// Feature width `F`.
    #[serde(default = "default_prior_dim")]
    pub dim: usize,
    /// Patch size of the provider; sets the receptive patch `q` when given.
    #[serde(default)]
    pub patch: Option<usize>,
    /// Train the featurizer weights instead of freezing them.
    #[serde(default)]
    pub tunable: bool,
    #[serde(default)]
    pub seed: u64,
    /// Feature container for [`PriorKind::File`].
    #[serde(default)]
    pub path: Option<String>,
}

fn default_prior_dim() -> usize {
    64
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: PriorKind::None,
            dim: default_prior_dim(),
            patch: None,
            tunable: false,
            seed: 0,
            path: None,
        }
    }
}

impl PriorConfig {
    pub fn enabled(&self) -> bool {
        self.kind != PriorKind::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub heads: usize,
    pub p1: usize,
    pub p2: usize,
    #[serde(default)]
    pub decouple: BTreeSet<Decouple>,
    #[serde(default = "yes")]
    pub recon_cross_view: bool,
    #[serde(default)]
    pub block_variant: BlockVariant,
    #[serde(default)]
    pub arch_variant: ArchVariant,
    #[serde(default)]
    pub prior: PriorConfig,
}

fn yes() -> bool {
    true
}

pub const PATCH_SIZES: [usize; 4] = [2, 4, 8, 16];
pub const MLP_RATIO: usize = 4;

impl ModelConfig {
    pub fn new(dim: usize, layers: usize, heads: usize, p1: usize, p2: usize) -> Self {
        ModelConfig {
            dim,
            layers,
            heads,
            p1,
            p2,
            decouple: BTreeSet::new(),
            recon_cross_view: true,
            block_variant: BlockVariant::Full,
            arch_variant: ArchVariant::KvCache,
            prior: PriorConfig::default(),
        }
    }

    pub fn with_decouple(mut self, flags: &[Decouple]) -> Self {
        self.decouple.extend(flags.iter().copied());
        self
    }

    /// Shared receptive patch size.
    pub fn q(&self) -> usize {
        match (self.prior.enabled(), self.prior.patch) {
            (true, Some(q)) => q,
            _ => self.p1.max(self.p2),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return bad(format!("D, L and heads must be positive (D={}, L={}, heads={})", self.dim, self.layers, self.heads));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("D={} is not divisible by heads={}", self.dim, self.heads));
        }
        for (n, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !PATCH_SIZES.contains(&p) {
                return bad(format!("{n}={p} not in {PATCH_SIZES:?}"));
            }
        }
        let q = self.q();
        if q == 0 || q % 2 != 0 {
            return bad(format!("receptive patch q={q} must be even"));
        }
        if self.prior.enabled() && self.prior.dim == 0 {
            return bad("prior dim must be positive".into());
        }
        if self.prior.kind == PriorKind::File && self.prior.path.is_none() {
            return bad("file prior needs prior.path".into());
        }
        Ok(())
    }

    pub fn covers(&self, group: Decouple) -> bool {
        self.decouple.contains(&group) || self.decouple.contains(&Decouple::EntireDecoder)
    }

    pub fn has_intra(&self) -> bool {
        self.block_variant != BlockVariant::NoIntra
    }

    pub fn has_mid_ffn(&self) -> bool {
        self.block_variant == BlockVariant::Full
    }

    /// Canonical JSON: sorted keys, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    /// 64-bit FNV-1a of [`ModelConfig::canonical_json`].
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Closed-form parameter count with a per-group breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub groups: BTreeMap<&'static str, usize>,
}

pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let (d, l, h, q, p2) = (cfg.dim, cfg.layers, cfg.heads, cfg.q(), cfg.p2);
    let attn = 4 * d * d + 2 * d + 2 * h;
    let mlp = 2 * MLP_RATIO * d * d + 2 * d;
    let mlps_per_block = 1 + cfg.has_mid_ffn() as usize;
    let intra = if cfg.has_intra() { attn } else { 0 };
    let block = intra + attn + mlps_per_block * mlp;

    let mut g = BTreeMap::new();
    g.insert("embed", 6 * q * q * d + 3 * q * q * d + 2 * d);
    g.insert("blocks", l * block);
    g.insert("head", 2 * d + 3 * p2 * p2 * d);
    if cfg.prior.enabled() {
        let f = cfg.prior.dim;
        let mut n = f * d;
        if cfg.prior.tunable && cfg.prior.kind == PriorKind::RandomFeaturizer {
            let s = q / 2;
            n += 3 * s * s * f + 4 * f * f;
        }
        g.insert("prior", n);
    }
    let mut dup = 0;
    if cfg.covers(Decouple::InputProj) {
        dup += 6 * q * q * d + 2 * d;
    }
    if cfg.covers(Decouple::IntraAttn) {
        dup += l * intra;
    }
    if cfg.covers(Decouple::CrossQo) {
        dup += l * 2 * d * d;
    }
    if cfg.covers(Decouple::Ffn) {
        dup += l * mlps_per_block * mlp;
    }
    if cfg.decouple.contains(&Decouple::EntireDecoder) {
        // cross-attention LayerNorm and logit gains
        dup += l * (2 * d + 2 * h);
    }
    if dup > 0 {
        g.insert("decoupled", dup);
    }
    ParamCount {
        total: g.values().sum(),
        groups: g,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_count_by_hand() {
        assert_eq!(count_params(&ModelConfig::new(8, 1, 2, 2, 2)).total, 2024);
    }

    #[test]
    fn cross_qo_delta() {
        for (d, l) in [(8, 1), (64, 4), (768, 12)] {
            let base = ModelConfig::new(d, l, 4, 8, 8);
            let dec = base.clone().with_decouple(&[Decouple::CrossQo]);
            assert_eq!(count_params(&dec).total - count_params(&base).total, 2 * d * d * l);
        }
    }

    #[test]
    fn json_keys_and_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"D":16,"L":2,"heads":2,"p1":4,"p2":4}"#).unwrap();
        assert!(cfg.recon_cross_view && cfg.decouple.is_empty());
        assert_eq!(cfg.q(), 4);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"D":16,"L":2,"heads":2,"p1":4,"p2":4,"bogus":1}"#).is_err());
        let back: ModelConfig = serde_json::from_str(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::new(10, 1, 3, 4, 4).validate().is_err());
        assert!(ModelConfig::new(8, 1, 2, 3, 4).validate().is_err());
        assert!(ModelConfig::new(8, 1, 2, 16, 8).validate().is_ok());
        assert_eq!(ModelConfig::new(8, 1, 2, 16, 8).q(), 16);
    }
}
