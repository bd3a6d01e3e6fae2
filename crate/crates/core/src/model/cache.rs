use serde_json::json;

use super::config::fnv1a64;
use super::net::{Grid, KvTensors};
use crate::error::{Error, Result};
use crate::geometry::Similarity;
use crate::tensor::io::Container;
use crate::tensor::{Array, Scalar, Tensor};

/// Reconstructed scene: cross-attention keys and values of every layer,
/// stored `[V·T, D]`, with the pose normalization they were computed under.
#[derive(Debug, Clone)]
pub struct SceneKVCache<T> {
    pub keys: Vec<Array<T>>,
    pub values: Vec<Array<T>>,
    pub views: usize,
    pub grid: Grid,
    pub transform: Similarity,
    pub config_hash: u64,
}

impl<T: Scalar> SceneKVCache<T> {
    pub fn from_tensors(kv: KvTensors<T>, transform: Similarity, config_hash: u64) -> Self {
        SceneKVCache {
            keys: kv.keys.into_iter().map(Tensor::into_value).collect(),
            values: kv.values.into_iter().map(Tensor::into_value).collect(),
            views: kv.views,
            grid: kv.grid,
            transform,
            config_hash,
        }
    }

    pub fn to_tensors(&self) -> KvTensors<T> {
        KvTensors {
            keys: self.keys.iter().cloned().map(Tensor::constant).collect(),
            values: self.values.iter().cloned().map(Tensor::constant).collect(),
            views: self.views,
            grid: self.grid,
            hidden: None,
        }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn tokens(&self) -> usize {
        self.views * self.grid.tokens()
    }

    /// FNV-1a over every cached value, for identity checks.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for a in self.keys.iter().chain(&self.values) {
            for &v in a.data() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Permutes view blocks: block `i` of the result is block `perm[i]`.
    pub fn permute_views(&self, perm: &[usize]) -> Result<Self> {
        let t = self.grid.tokens();
        let shuffle = |a: &Array<T>| -> Result<Array<T>> {
            let blocks: Vec<Array<T>> = perm
                .iter()
                .map(|&p| a.slice_axis0(p * t, (p + 1) * t))
                .collect::<Result<_>>()?;
            Array::concat0(&blocks)
        };
        Ok(SceneKVCache {
            keys: self.keys.iter().map(shuffle).collect::<Result<_>>()?,
            values: self.values.iter().map(shuffle).collect::<Result<_>>()?,
            ..self.clone()
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "scene_kv_cache",
            "views": self.views,
            "grid": self.grid,
            "transform": self.transform,
            "config_hash": format!("{:016x}", self.config_hash),
        }));
        for (i, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            c.tensors.push((format!("k.{i}"), k.cast()));
            c.tensors.push((format!("v.{i}"), v.cast()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = &c.metadata;
        let bad = |what: &str| Error::Format(format!("cache metadata: bad {what}"));
        let views = m["views"].as_u64().ok_or_else(|| bad("views"))? as usize;
        let grid: Grid = serde_json::from_value(m["grid"].clone())?;
        let transform: Similarity = serde_json::from_value(m["transform"].clone())?;
        let config_hash = m["config_hash"]
            .as_str()
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .ok_or_else(|| bad("config_hash"))?;
        let layers = c.tensors.len() / 2;
        let get = |n: String| c.get(&n).map(Array::cast).ok_or_else(|| Error::Format(format!("cache lacks {n}")));
        Ok(SceneKVCache {
            keys: (0..layers).map(|i| get(format!("k.{i}"))).collect::<Result<_>>()?,
            values: (0..layers).map(|i| get(format!("v.{i}"))).collect::<Result<_>>()?,
            views,
            grid,
            transform,
            config_hash,
        })
    }
}
