//! The view synthesis network: shared tokenizers, alternating intra/cross
//! view blocks, KV-cache reconstruction and camera-only rendering.

mod cache;
pub mod config;
mod net;
pub mod prior;
pub mod weights;

use std::collections::BTreeMap;
use std::path::Path;

pub use cache::SceneKVCache;
pub use config::{count_params, ArchVariant, BlockVariant, Decouple, ModelConfig, ParamCount, PriorConfig, PriorKind};
pub use net::{Grid, KvTensors, Net, OpTrace, StageTrace};
pub use prior::{Featurizer, PriorProvider};
pub use weights::{param_specs, resolve, ParamSpec, Stage, WeightBundle};

use crate::error::{Error, Result};
use crate::geometry::{normalize_poses, Camera, Similarity};
use crate::tensor::io::Container;
use crate::tensor::{Array, Scalar, Tensor};

/// Configuration, weights and prior provider of one model.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub weights: WeightBundle<T>,
    pub prior: Option<PriorProvider<T>>,
}

/// Cross-attention outputs of both branches at one context viewpoint.
#[derive(Debug, Clone)]
pub struct AttendedPair<T> {
    pub recon: Array<T>,
    pub rend: Array<T>,
    /// [`SceneKVCache::content_hash`] of the cache both branches read.
    pub cache_hash: u64,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, weights: WeightBundle<T>) -> Result<Self> {
        cfg.validate()?;
        weights.check(&cfg)?;
        let prior = PriorProvider::from_config(&cfg)?;
        Ok(Model { cfg, weights, prior })
    }

    pub fn constants(&self) -> BTreeMap<String, Tensor<T>> {
        self.weights
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::constant(v.clone())))
            .collect()
    }

    /// Runs `f` with a forward context over constant parameters.
    pub fn with_net<R>(&self, f: impl FnOnce(&Net<T>) -> Result<R>) -> Result<R> {
        let params = self.constants();
        let net = Net::new(&self.cfg, &params, self.prior.as_ref())?;
        f(&net)
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        Model::new(self.cfg.clone(), self.weights.cast())
    }

    fn check_arch(&self) -> Result<()> {
        if self.cfg.arch_variant != ArchVariant::KvCache {
            return Err(Error::Config("model is a concat baseline; use forward_concat_baseline".into()));
        }
        Ok(())
    }

    /// Normalizes `cams` and builds the scene cache from `images`.
    pub fn reconstruct(&self, images: &[Array<T>], cams: &[Camera]) -> Result<SceneKVCache<T>> {
        self.check_arch()?;
        let (norm, transform) = normalize_poses(cams)?;
        let kv = self.with_net(|net| net.reconstruct(images, &norm, false))?;
        Ok(SceneKVCache::from_tensors(kv, transform, self.cfg.hash()))
    }

    /// Builds the cache from cameras already in the normalized frame
    /// described by `transform`.
    pub fn reconstruct_normalized(&self, images: &[Array<T>], norm_cams: &[Camera], transform: Similarity) -> Result<SceneKVCache<T>> {
        self.check_arch()?;
        let kv = self.with_net(|net| net.reconstruct(images, norm_cams, false))?;
        Ok(SceneKVCache::from_tensors(kv, transform, self.cfg.hash()))
    }

    /// Final hidden state of a complete reconstruction pass, `[V·T, D]`.
    pub fn reconstruct_hidden(&self, images: &[Array<T>], cams: &[Camera]) -> Result<Array<T>> {
        let (norm, _) = normalize_poses(cams)?;
        let kv = self.with_net(|net| net.reconstruct(images, &norm, true))?;
        Ok(kv.hidden.expect("complete pass").into_value())
    }

    /// Renders a world-frame camera; the cache's normalization is applied.
    pub fn render(&self, cache: &SceneKVCache<T>, cam: &Camera) -> Result<Array<T>> {
        self.render_traced(cache, cam).map(|(img, _)| img)
    }

    pub fn render_traced(&self, cache: &SceneKVCache<T>, cam: &Camera) -> Result<(Array<T>, OpTrace)> {
        self.check_arch()?;
        if cache.config_hash != self.cfg.hash() {
            return Err(Error::Config(format!(
                "cache built by config {:016x}, model is {:016x}",
                cache.config_hash,
                self.cfg.hash()
            )));
        }
        let cam = cache.transform.apply(cam);
        self.with_net(|net| {
            let img = net.render(&cache.to_tensors(), &cam)?;
            Ok((img.into_value(), net.trace()))
        })
    }

    /// Reconstruct-then-render op counts for one scene and one query.
    pub fn trace(&self, images: &[Array<T>], cams: &[Camera], cam: &Camera) -> Result<OpTrace> {
        self.check_arch()?;
        let (norm, transform) = normalize_poses(cams)?;
        let cam = transform.apply(cam);
        self.with_net(|net| {
            let kv = net.reconstruct(images, &norm, false)?;
            net.render(&kv, &cam)?;
            Ok(net.trace())
        })
    }

    /// Joint masked forward that recomputes context keys and values instead
    /// of reading a cache.
    pub fn render_recompute_oracle(&self, images: &[Array<T>], cams: &[Camera], cam: &Camera) -> Result<Array<T>> {
        let (norm, transform) = normalize_poses(cams)?;
        let cam = transform.apply(cam);
        self.with_net(|net| Ok(net.recompute(images, &norm, &cam)?.into_value()))
    }

    /// Decoder-only baseline over the concatenated context and query tokens.
    pub fn forward_concat_baseline(&self, images: &[Array<T>], cams: &[Camera], cam: &Camera) -> Result<Array<T>> {
        self.forward_concat_traced(images, cams, cam).map(|(img, _)| img)
    }

    pub fn forward_concat_traced(&self, images: &[Array<T>], cams: &[Camera], cam: &Camera) -> Result<(Array<T>, OpTrace)> {
        let (norm, cam) = if cams.is_empty() {
            (Vec::new(), cam.clone())
        } else {
            let (norm, transform) = normalize_poses(cams)?;
            (norm, transform.apply(cam))
        };
        self.with_net(|net| {
            let img = net.concat_forward(images, &norm, &cam)?;
            Ok((img.into_value(), net.trace()))
        })
    }

    /// Cross-attention outputs at layer `layer` for context view `view`,
    /// from the reconstruction pass and from a rendering query at the same
    /// camera. Requires `p1 == p2` so both branches share a token grid.
    pub fn attended_features(&self, images: &[Array<T>], cams: &[Camera], view: usize, layer: usize) -> Result<AttendedPair<T>> {
        self.check_arch()?;
        if layer >= self.cfg.layers {
            return Err(Error::Invalid(format!("layer {layer} out of range for L={}", self.cfg.layers)));
        }
        if view >= cams.len() {
            return Err(Error::Invalid(format!("view {view} out of range for {} views", cams.len())));
        }
        if self.cfg.p1 != self.cfg.p2 {
            return Err(Error::Config("attended features need p1 == p2".into()));
        }
        let (norm, transform) = normalize_poses(cams)?;
        self.with_net(|net| {
            let kv = net.reconstruct(images, &norm, true)?;
            let cache = SceneKVCache::from_tensors(kv.clone(), transform, self.cfg.hash());
            let t = kv.grid.tokens();
            net.render(&cache.to_tensors(), &norm[view])?;
            let pick = |stage: Stage| {
                net.attended()
                    .into_iter()
                    .find(|(s, l, _)| *s == stage && *l == layer)
                    .map(|(_, _, x)| x.into_value())
                    .ok_or_else(|| Error::Invalid(format!("no {stage:?} features at layer {layer}")))
            };
            let recon = pick(Stage::Recon)?.slice_axis0(view * t, (view + 1) * t)?;
            Ok(AttendedPair {
                recon,
                rend: pick(Stage::Rend)?,
                cache_hash: cache.content_hash(),
            })
        })
    }

    /// Writes a checkpoint container; `extra` is merged into the metadata.
    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        let mut meta = serde_json::json!({
            "kind": "dvsm_model",
            "model": self.cfg,
            "config_hash": format!("{:016x}", self.cfg.hash()),
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut c = Container::new(meta);
        for (k, v) in &self.weights.params {
            c.tensors.push((k.clone(), v.cast()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(c.metadata["model"].clone())?;
        let params = c.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Model::new(cfg, WeightBundle::new(params))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_container(extra).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
