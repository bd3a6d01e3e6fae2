use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{fnv1a64, ModelConfig, PriorKind};
use crate::error::{Error, Result};
use crate::tensor::io::Container;
use crate::tensor::{nn, Array, Scalar, Tensor};

/// Two-layer strided featurizer: a `patch/2` convolution with stride
/// `patch/2`, GELU, then a 2×2 stride-2 convolution and GELU. One output
/// vector per `patch × patch` input patch.
pub fn featurize<T: Scalar>(img: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    if patch < 2 || patch % 2 != 0 {
        return Err(Error::Invalid(format!("featurizer patch {patch} must be even")));
    }
    let s = patch / 2;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (gh, gw) = (h / s, w / s);
    let f = w1.shape()[1];
    let hidden = nn::gelu(&nn::patchify(img, s)?.matmul(w1)?)?;
    let grid = hidden.reshape(&[gh, gw, f])?.permute(&[2, 0, 1])?;
    nn::gelu(&nn::patchify(&grid, 2)?.matmul(w2)?)
}

/// Frozen random featurizer weights.
#[derive(Debug, Clone)]
pub struct Featurizer<T> {
    pub patch: usize,
    pub w1: Array<T>,
    pub w2: Array<T>,
}

impl<T: Scalar> Featurizer<T> {
    /// Gaussian weights scaled by `1/√fan_in`, fixed by `seed`.
    pub fn random(patch: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = patch / 2;
        let mut draw = |rows: usize, cols: usize| {
            let std = 1.0 / (rows as f64).sqrt();
            Array::from_fn(&[rows, cols], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(z * std)
            })
        };
        let w1 = draw(3 * s * s, dim);
        let w2 = draw(4 * dim, dim);
        Featurizer { patch, w1, w2 }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn apply(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        featurize(img, &Tensor::constant(self.w1.clone()), &Tensor::constant(self.w2.clone()), self.patch)
    }
}

/// Source of per-patch prior features added to reconstruction tokens.
#[derive(Debug, Clone)]
pub enum PriorProvider<T> {
    /// Featurizer with fixed weights. Tunable configs read the weights from
    /// the parameter store instead and only use the patch size from here.
    Random(Featurizer<T>),
    /// Precomputed features keyed by [`image_key`].
    File {
        patch: usize,
        dim: usize,
        features: BTreeMap<u64, Array<T>>,
    },
}

/// Lookup key of an image for file-backed priors: FNV-1a of its f32 bytes.
pub fn image_key<T: Scalar>(img: &Array<T>) -> u64 {
    let mut bytes = Vec::with_capacity(img.len() * 4 + 16);
    for &e in img.shape() {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in img.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fnv1a64(&bytes)
}

impl<T: Scalar> PriorProvider<T> {
    pub fn from_config(cfg: &ModelConfig) -> Result<Option<Self>> {
        let q = cfg.q();
        match cfg.prior.kind {
            PriorKind::None => Ok(None),
            PriorKind::RandomFeaturizer => Ok(Some(PriorProvider::Random(Featurizer::random(q, cfg.prior.dim, cfg.prior.seed)))),
            PriorKind::File => {
                let path = cfg.prior.path.as_deref().ok_or_else(|| Error::Config("file prior needs prior.path".into()))?;
                let p = Self::load(Path::new(path))?;
                if let PriorProvider::File { patch, dim, .. } = &p {
                    if *patch != q || *dim != cfg.prior.dim {
                        return Err(Error::Config(format!(
                            "prior file has patch {patch}, dim {dim}; config wants {q}, {}",
                            cfg.prior.dim
                        )));
                    }
                }
                Ok(Some(p))
            }
        }
    }

    pub fn patch(&self) -> usize {
        match self {
            PriorProvider::Random(f) => f.patch,
            PriorProvider::File { patch, .. } => *patch,
        }
    }

    /// Features `[T, F]` of an image already resized to the receptive grid.
    /// `tunable` carries `(w1, w2)` from the parameter store.
    pub fn features(&self, img: &Array<T>, tunable: Option<(&Tensor<T>, &Tensor<T>)>) -> Result<Tensor<T>> {
        match (self, tunable) {
            (PriorProvider::Random(f), Some((w1, w2))) => featurize(&Tensor::constant(img.clone()), w1, w2, f.patch),
            (PriorProvider::Random(f), None) => f.apply(&Tensor::constant(img.clone())),
            (PriorProvider::File { features, patch, .. }, _) => {
                let key = image_key(img);
                let feat = features
                    .get(&key)
                    .ok_or_else(|| Error::Invalid(format!("no prior features for image {key:016x}")))?;
                let tokens = (img.shape()[1] / patch) * (img.shape()[2] / patch);
                if feat.shape()[0] != tokens {
                    return Err(Error::shape("prior features", feat.shape(), &[tokens]));
                }
                Ok(Tensor::constant(feat.clone()))
            }
        }
    }

    /// Writes features of `images` (already receptive-resized) computed by
    /// `featurizer` into a container readable by [`PriorProvider::load`].
    pub fn precompute(featurizer: &Featurizer<T>, images: &[Array<T>], path: &Path) -> Result<()> {
        let meta = serde_json::json!({"kind": "prior_features", "patch": featurizer.patch, "dim": featurizer.dim()});
        let mut c = Container::new(meta);
        for img in images {
            let feat = featurizer.apply(&Tensor::constant(img.clone()))?;
            c.tensors.push((format!("{:016x}", image_key(img)), feat.value().cast()));
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let num = |k: &str| {
            c.metadata[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("prior file metadata lacks {k}")))
        };
        let (patch, dim) = (num("patch")?, num("dim")?);
        let mut features = BTreeMap::new();
        for (name, a) in &c.tensors {
            let key = u64::from_str_radix(name, 16).map_err(|_| Error::Format(format!("bad prior key {name}")))?;
            features.insert(key, a.cast());
        }
        Ok(PriorProvider::File { patch, dim, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn featurizer_grid_matches_patch_grid() {
        let f = Featurizer::<f64>::random(8, 5, 3);
        let img = Tensor::constant(Array::from_fn(&[3, 16, 24], |i| (i as f64 * 0.37).sin()));
        assert_eq!(f.apply(&img).unwrap().shape(), &[6, 5]);
        let g = Featurizer::<f64>::random(8, 5, 3);
        assert_eq!(f.w1, g.w1);
    }

    #[test]
    fn file_provider_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.dvsm");
        let f = Featurizer::<f32>::random(4, 6, 1);
        let imgs: Vec<Array<f32>> = (0..2).map(|k| Array::from_fn(&[3, 8, 8], |i| ((i + k) % 7) as f32 / 7.0)).collect();
        PriorProvider::precompute(&f, &imgs, &path).unwrap();
        let p = PriorProvider::<f32>::load(&path).unwrap();
        for img in &imgs {
            let a = p.features(img, None).unwrap();
            let b = f.apply(&Tensor::constant(img.clone())).unwrap();
            assert_eq!(a.value(), b.value());
        }
        assert!(p.features(&Array::zeros(&[3, 8, 8]), None).is_err());
    }
}
