use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::Serialize;

use super::config::{ModelConfig, PriorKind};
use super::prior::PriorProvider;
use super::weights::{resolve, Stage};
use crate::error::{Error, Result};
use crate::geometry::{plucker_map, receptive_extent, receptive_resize, Camera};
use crate::tensor::nn::{self, AttentionOpts};
use crate::tensor::{Array, Scalar, Tensor};

/// Operation counts for one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageTrace {
    pub attention_calls: usize,
    pub query_tokens: usize,
    pub key_tokens: usize,
    pub linear_calls: usize,
    pub linear_rows: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpTrace {
    pub recon: StageTrace,
    pub rend: StageTrace,
}

impl OpTrace {
    fn stage(&mut self, s: Stage) -> &mut StageTrace {
        match s {
            Stage::Recon => &mut self.recon,
            Stage::Rend => &mut self.rend,
        }
    }
}

/// Token grid of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Grid {
    pub gh: usize,
    pub gw: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.gh * self.gw
    }
}

/// Per-layer cross-attention keys and values `[V·T, D]`.
#[derive(Debug, Clone)]
pub struct KvTensors<T: Scalar> {
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    pub views: usize,
    pub grid: Grid,
    /// Final reconstruction hidden state `[V·T, D]`, from complete passes only.
    pub hidden: Option<Tensor<T>>,
}

/// Forward context: parameters as tensors (constants for inference, tape
/// leaves for training) plus an operation trace.
pub struct Net<'a, T: Scalar> {
    pub cfg: &'a ModelConfig,
    params: &'a BTreeMap<String, Tensor<T>>,
    prior: Option<&'a PriorProvider<T>>,
    trace: RefCell<OpTrace>,
    attended: RefCell<Vec<(Stage, usize, Tensor<T>)>>,
}

const MASKED: f64 = -1e9;

impl<'a, T: Scalar> Net<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a BTreeMap<String, Tensor<T>>, prior: Option<&'a PriorProvider<T>>) -> Result<Self> {
        if cfg.prior.enabled() && prior.is_none() {
            return Err(Error::Config("prior enabled but no provider given".into()));
        }
        Ok(Net {
            cfg,
            params,
            prior,
            trace: RefCell::new(OpTrace::default()),
            attended: RefCell::new(Vec::new()),
        })
    }

    pub fn trace(&self) -> OpTrace {
        *self.trace.borrow()
    }

    pub fn reset_trace(&self) {
        *self.trace.borrow_mut() = OpTrace::default();
        self.attended.borrow_mut().clear();
    }

    /// Cross-attention outputs before the output projection, recorded as
    /// `(stage, layer, [tokens, D])`.
    pub fn attended(&self) -> Vec<(Stage, usize, Tensor<T>)> {
        self.attended.borrow().clone()
    }

    fn p(&self, stage: Stage, base: &str) -> Result<&Tensor<T>> {
        let name = resolve(self.cfg, stage, base);
        self.params
            .get(&name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn linear(&self, stage: Stage, x: &Tensor<T>, base: &str) -> Result<Tensor<T>> {
        let t = &mut *self.trace.borrow_mut();
        let st = t.stage(stage);
        st.linear_calls += 1;
        st.linear_rows += x.shape()[0];
        x.matmul(self.p(stage, base)?)
    }

    fn ln(&self, stage: Stage, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let g = self.p(stage, &format!("{prefix}.ln.gamma"))?;
        let b = self.p(stage, &format!("{prefix}.ln.beta"))?;
        nn::layer_norm(x, g, b, nn::LAYER_NORM_EPS)
    }

    fn logit_scale(&self, stage: Stage, prefix: &str) -> Result<Tensor<T>> {
        self.p(stage, &format!("{prefix}.q_gain"))?
            .mul(self.p(stage, &format!("{prefix}.k_gain"))?)
    }

    fn attend(&self, stage: Stage, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: &Tensor<T>, opts: &AttentionOpts<T>) -> Result<Tensor<T>> {
        {
            let t = &mut *self.trace.borrow_mut();
            let st = t.stage(stage);
            let s = q.shape();
            let groups: usize = s[..s.len() - 3].iter().product();
            st.attention_calls += 1;
            st.query_tokens += groups * s[s.len() - 2];
            st.key_tokens += groups * k.shape()[k.shape().len() - 2];
        }
        nn::attention(q, k, v, scale, opts)
    }

    fn ray_tokens(cam: &Camera, h: usize, w: usize, q: usize) -> Result<Tensor<T>> {
        let map = plucker_map(cam, h, w)?.channels_first::<T>();
        nn::patchify(&Tensor::constant(map), q)
    }

    /// `LN(PE_ray(rays) + PE_rgb(image) [+ Prior(image)])` for every view,
    /// stacked to `[V·T, D]`. Cameras must already be normalized.
    pub fn embed_recon(&self, images: &[Array<T>], cams: &[Camera]) -> Result<(Tensor<T>, Grid)> {
        if images.is_empty() || images.len() != cams.len() {
            return Err(Error::Invalid(format!("{} images for {} cameras", images.len(), cams.len())));
        }
        let (q, p1) = (self.cfg.q(), self.cfg.p1);
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Invalid(format!("images must be [3,H,W], got {shape:?}")));
        }
        let mut rgb = Vec::with_capacity(images.len());
        let mut rays = Vec::with_capacity(images.len());
        let mut prior = Vec::new();
        let tunable = match (self.cfg.prior.tunable, self.cfg.prior.kind) {
            (true, PriorKind::RandomFeaturizer) => Some((self.p(Stage::Recon, "prior.w1")?, self.p(Stage::Recon, "prior.w2")?)),
            _ => None,
        };
        let mut grid = Grid { gh: 0, gw: 0 };
        for (img, cam) in images.iter().zip(cams) {
            if img.shape() != shape.as_slice() {
                return Err(Error::shape("embed_recon(views)", img.shape(), &shape));
            }
            let resized = receptive_resize(img, p1, q)?;
            let (h, w) = (resized.shape()[1], resized.shape()[2]);
            grid = Grid { gh: h / q, gw: w / q };
            rgb.push(nn::patchify(&Tensor::constant(resized.clone()), q)?);
            rays.push(Self::ray_tokens(cam, h, w, q)?);
            if let Some(provider) = self.prior {
                prior.push(provider.features(&resized, tunable)?);
            }
        }
        let s = Stage::Recon;
        let mut e = self
            .linear(s, &Tensor::concat0(&rays)?, "embed.ray")?
            .add(&self.linear(s, &Tensor::concat0(&rgb)?, "embed.rgb")?)?;
        if !prior.is_empty() {
            e = e.add(&self.linear(s, &Tensor::concat0(&prior)?, "prior.proj")?)?;
        }
        Ok((self.ln(s, &e, "embed")?, grid))
    }

    /// `LN(PE_ray(rays))` for a query camera, `[T', D]`.
    pub fn embed_rend(&self, cam: &Camera) -> Result<(Tensor<T>, Grid)> {
        let (q, p2) = (self.cfg.q(), self.cfg.p2);
        if cam.height % p2 != 0 || cam.width % p2 != 0 {
            return Err(Error::Invalid(format!(
                "render size {}x{} not divisible by p2={p2}",
                cam.width, cam.height
            )));
        }
        let h = receptive_extent(cam.height, p2, q)?;
        let w = receptive_extent(cam.width, p2, q)?;
        let rays = Self::ray_tokens(cam, h, w, q)?;
        let e = self.linear(Stage::Rend, &rays, "embed.ray")?;
        Ok((self.ln(Stage::Rend, &e, "embed")?, Grid { gh: h / q, gw: w / q }))
    }

    fn intra(&self, s: Stage, x: &Tensor<T>, layer: usize, groups: usize) -> Result<Tensor<T>> {
        let pre = format!("blocks.{layer}.intra");
        let h = self.cfg.heads;
        let xl = self.ln(s, x, &pre)?;
        let q = nn::split_heads(&self.linear(s, &xl, &format!("{pre}.wq"))?, groups, h)?;
        let k = nn::split_heads(&self.linear(s, &xl, &format!("{pre}.wk"))?, groups, h)?;
        let v = nn::split_heads(&self.linear(s, &xl, &format!("{pre}.wv"))?, groups, h)?;
        let o = self.attend(s, &q, &k, &v, &self.logit_scale(s, &pre)?, &AttentionOpts::default())?;
        x.add(&self.linear(s, &nn::merge_heads(&o)?, &format!("{pre}.wo"))?)
    }

    fn mlp(&self, s: Stage, x: &Tensor<T>, layer: usize, kind: &str) -> Result<Tensor<T>> {
        let pre = format!("blocks.{layer}.{kind}");
        let hidden = nn::gelu(&self.linear(s, &self.ln(s, x, &pre)?, &format!("{pre}.w1"))?)?;
        x.add(&self.linear(s, &hidden, &format!("{pre}.w2"))?)
    }

    /// Pre-cross half of a block: intra attention and its MLP.
    fn intra_half(&self, s: Stage, x: Tensor<T>, layer: usize, groups: usize) -> Result<Tensor<T>> {
        if !self.cfg.has_intra() {
            return Ok(x);
        }
        let x = self.intra(s, &x, layer, groups)?;
        if self.cfg.has_mid_ffn() {
            self.mlp(s, &x, layer, "intra_mlp")
        } else {
            Ok(x)
        }
    }

    /// Runs the reconstruction stage and returns the per-layer cross-attention
    /// keys and values. With `complete = false` the final layer's query path,
    /// which cannot affect the cache, is skipped.
    pub fn reconstruct(&self, images: &[Array<T>], cams: &[Camera], complete: bool) -> Result<KvTensors<T>> {
        let (mut x, grid) = self.embed_recon(images, cams)?;
        let views = images.len();
        let (d, h, l) = (self.cfg.dim, self.cfg.heads, self.cfg.layers);
        let s = Stage::Recon;
        let mut keys = Vec::with_capacity(l);
        let mut values = Vec::with_capacity(l);
        let mut hidden = None;
        for i in 0..l {
            x = self.intra_half(s, x, i, views)?;
            let pre = format!("blocks.{i}.cross");
            let xl = self.ln(s, &x, &pre)?;
            let k = self.linear(s, &xl, &format!("{pre}.wk"))?;
            let v = self.linear(s, &xl, &format!("{pre}.wv"))?;
            keys.push(k.clone());
            values.push(v.clone());
            if i + 1 == l && !complete {
                break;
            }
            let groups = if self.cfg.recon_cross_view { 1 } else { views };
            let q = nn::split_heads(&self.linear(s, &xl, &format!("{pre}.wq"))?, groups, h)?;
            let o = self.attend(
                s,
                &q,
                &nn::split_heads(&k, groups, h)?,
                &nn::split_heads(&v, groups, h)?,
                &self.logit_scale(s, &pre)?,
                &AttentionOpts::default(),
            )?;
            let o = nn::merge_heads(&o)?;
            self.attended.borrow_mut().push((s, i, o.clone()));
            x = x.add(&self.linear(s, &o, &format!("{pre}.wo"))?)?;
            x = self.mlp(s, &x, i, "cross_mlp")?;
            if i + 1 == l {
                hidden = Some(x.clone());
            }
        }
        debug_assert!(keys.iter().all(|k| k.shape() == [views * grid.tokens(), d]));
        Ok(KvTensors { keys, values, views, grid, hidden })
    }

    /// Renders `cam` from cached keys and values. Novel tokens attend each
    /// other only in intra attention; cross attention reads the cache alone.
    pub fn render(&self, kv: &KvTensors<T>, cam: &Camera) -> Result<Tensor<T>> {
        let l = self.cfg.layers;
        if kv.keys.len() != l || kv.values.len() != l {
            return Err(Error::Invalid(format!("cache has {} layers, model has {l}", kv.keys.len())));
        }
        let (mut x, grid) = self.embed_rend(cam)?;
        let h = self.cfg.heads;
        let s = Stage::Rend;
        for i in 0..l {
            x = self.intra_half(s, x, i, 1)?;
            let pre = format!("blocks.{i}.cross");
            let xl = self.ln(s, &x, &pre)?;
            let q = nn::split_heads(&self.linear(s, &xl, &format!("{pre}.wq"))?, 1, h)?;
            let o = self.attend(
                s,
                &q,
                &nn::split_heads(&kv.keys[i], 1, h)?,
                &nn::split_heads(&kv.values[i], 1, h)?,
                &self.logit_scale(s, &pre)?,
                &AttentionOpts::default(),
            )?;
            let o = nn::merge_heads(&o)?;
            self.attended.borrow_mut().push((s, i, o.clone()));
            x = x.add(&self.linear(s, &o, &format!("{pre}.wo"))?)?;
            x = self.mlp(s, &x, i, "cross_mlp")?;
        }
        self.head(&x, grid)
    }

    fn head(&self, x: &Tensor<T>, grid: Grid) -> Result<Tensor<T>> {
        let y = self.linear(Stage::Rend, &self.ln(Stage::Rend, x, "head")?, "head.out")?.sigmoid()?;
        nn::unpatchify(&y, 3, grid.gh, grid.gw, self.cfg.p2)
    }

    /// L2-normalizes each head of `x [n, D]` and multiplies it by `gain [h]`.
    fn head_normalize(&self, x: &Tensor<T>, gain: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (n, h) = (x.shape()[0], self.cfg.heads);
        let mut y = nn::l2_normalize(&x.reshape(&[n, h, self.cfg.head_dim()])?, nn::L2_NORM_EPS)?;
        if let Some(g) = gain {
            y = y.mul(&g.reshape(&[h, 1])?)?;
        }
        y.reshape(&[n, self.cfg.dim])
    }

    /// One attention sublayer over a joint sequence whose row blocks may use
    /// different stage weights. Only parts flagged in `key_parts` contribute
    /// keys and values; `mask` is `[rows, key rows]`. Returns each part with
    /// its residual update applied.
    fn joint_attention(
        &self,
        parts: &[(Stage, Tensor<T>)],
        pre: &str,
        key_parts: &[bool],
        mask: Option<Array<T>>,
        record: Option<usize>,
    ) -> Result<Vec<Tensor<T>>> {
        let h = self.cfg.heads;
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for ((s, x), &has_kv) in parts.iter().zip(key_parts) {
            let xl = self.ln(*s, x, pre)?;
            let q = self.linear(*s, &xl, &format!("{pre}.wq"))?;
            qs.push(self.head_normalize(&q, Some(&self.logit_scale(*s, pre)?))?);
            if has_kv {
                let k = self.linear(*s, &xl, &format!("{pre}.wk"))?;
                ks.push(self.head_normalize(&k, None)?);
                vs.push(self.linear(*s, &xl, &format!("{pre}.wv"))?);
            }
        }
        let stage = parts.last().map(|p| p.0).unwrap_or(Stage::Recon);
        let o = self.attend(
            stage,
            &nn::split_heads(&Tensor::concat0(&qs)?, 1, h)?,
            &nn::split_heads(&Tensor::concat0(&ks)?, 1, h)?,
            &nn::split_heads(&Tensor::concat0(&vs)?, 1, h)?,
            &Tensor::constant(Array::ones(&[h])),
            &AttentionOpts { qk_norm: false, mask },
        )?;
        let o = nn::merge_heads(&o)?;
        let mut out = Vec::with_capacity(parts.len());
        let mut row = 0;
        for (s, x) in parts {
            let n = x.shape()[0];
            let oi = o.slice0(row, row + n)?;
            if let Some(layer) = record {
                self.attended.borrow_mut().push((*s, layer, oi.clone()));
            }
            out.push(x.add(&self.linear(*s, &oi, &format!("{pre}.wo"))?)?);
            row += n;
        }
        Ok(out)
    }

    fn joint_layer(&self, parts: Vec<(Stage, Tensor<T>)>, layer: usize, intra_mask: &Array<T>, cross_keys: &[bool], cross_mask: Option<Array<T>>) -> Result<Vec<(Stage, Tensor<T>)>> {
        let stages: Vec<Stage> = parts.iter().map(|p| p.0).collect();
        let zip = |xs: Vec<Tensor<T>>| stages.iter().copied().zip(xs).collect::<Vec<_>>();
        let mut parts = parts;
        if self.cfg.has_intra() {
            let all = vec![true; parts.len()];
            let xs = self.joint_attention(&parts, &format!("blocks.{layer}.intra"), &all, Some(intra_mask.clone()), None)?;
            parts = zip(xs);
            if self.cfg.has_mid_ffn() {
                parts = parts
                    .into_iter()
                    .map(|(s, x)| Ok((s, self.mlp(s, &x, layer, "intra_mlp")?)))
                    .collect::<Result<_>>()?;
            }
        }
        let xs = self.joint_attention(&parts, &format!("blocks.{layer}.cross"), cross_keys, cross_mask, Some(layer))?;
        zip(xs)
            .into_iter()
            .map(|(s, x)| Ok((s, self.mlp(s, &x, layer, "cross_mlp")?)))
            .collect()
    }

    /// Context and novel tokens processed in one sequence with attention
    /// masks, recomputing context keys and values at every layer.
    pub fn recompute(&self, images: &[Array<T>], cams: &[Camera], cam: &Camera) -> Result<Tensor<T>> {
        let (ctx, grid) = self.embed_recon(images, cams)?;
        let (nov, ngrid) = self.embed_rend(cam)?;
        let (t, nt, v) = (grid.tokens(), ngrid.tokens(), images.len());
        let n_ctx = v * t;
        let group = |i: usize| if i < n_ctx { i / t } else { v };
        let intra = block_mask(n_ctx + nt, n_ctx + nt, |a, b| group(a) == group(b));
        let per_view = !self.cfg.recon_cross_view;
        let cross = block_mask(n_ctx + nt, n_ctx, |a, b| !per_view || a >= n_ctx || group(a) == group(b));
        let mut parts = vec![(Stage::Recon, ctx), (Stage::Rend, nov)];
        for i in 0..self.cfg.layers {
            parts = self.joint_layer(parts, i, &intra, &[true, false], Some(cross.clone()))?;
        }
        self.head(&parts[1].1, ngrid)
    }

    /// Decoder-only baseline: one sequence of context and novel tokens,
    /// intra attention per view and cross attention over everything.
    pub fn concat_forward(&self, images: &[Array<T>], cams: &[Camera], cam: &Camera) -> Result<Tensor<T>> {
        let (nov, ngrid) = self.embed_rend(cam)?;
        let nt = ngrid.tokens();
        let mut parts = Vec::new();
        let mut t = 0;
        if !images.is_empty() {
            let (ctx, grid) = self.embed_recon(images, cams)?;
            t = grid.tokens();
            parts.push((Stage::Recon, ctx));
        }
        parts.push((Stage::Rend, nov));
        let n_ctx = images.len() * t;
        let group = |i: usize| if i < n_ctx { i / t } else { images.len() };
        let rows = n_ctx + nt;
        let intra = block_mask(rows, rows, |a, b| group(a) == group(b));
        let keys = vec![true; parts.len()];
        for i in 0..self.cfg.layers {
            parts = self.joint_layer(parts, i, &intra, &keys, None)?;
        }
        self.head(&parts.last().expect("novel part").1, ngrid)
    }
}

fn block_mask<T: Scalar>(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Array<T> {
    Array::from_fn(&[rows, cols], |i| {
        if allowed(i / cols, i % cols) {
            T::zero()
        } else {
            T::from_f64(MASKED)
        }
    })
}
