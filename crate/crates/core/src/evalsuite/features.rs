use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scenes::{ppm, SceneData};
use crate::tensor::{Array, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub layer: usize,
    pub mean_cos: f64,
    pub std_cos: f64,
}

/// Row-wise cosine similarity of two `[T, D]` feature sets: mean and
/// population standard deviation over tokens.
pub fn cosine_stats<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<(f64, f64)> {
    if a.shape() != b.shape() || a.rank() != 2 || a.shape()[0] == 0 {
        return Err(Error::shape("cosine_stats", a.shape(), b.shape()));
    }
    let d = a.shape()[1];
    let cos: Vec<f64> = a
        .data()
        .chunks_exact(d)
        .zip(b.data().chunks_exact(d))
        .map(|(x, y)| {
            let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for (&p, &q) in x.iter().zip(y) {
                let (p, q) = (p.as_f64(), q.as_f64());
                xy += p * q;
                xx += p * p;
                yy += q * q;
            }
            let denom = (xx * yy).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                (xy / denom).clamp(-1.0, 1.0)
            }
        })
        .collect();
    let n = cos.len() as f64;
    let mean = cos.iter().sum::<f64>() / n;
    let var = cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Projects the rows of `feats` (`[N, D]`) onto their top three principal
/// components, each min-max scaled into `[0, 1]`.
pub fn pca_rgb(feats: &[Vec<f64>]) -> Result<Vec<[f64; 3]>> {
    let n = feats.len();
    let d = feats.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::Invalid("pca of an empty feature set".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| feats.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![[0.0; 3]; n];
    for (c, &k) in order.iter().take(3).enumerate() {
        let proj = &x * eig.eigenvectors.column(k);
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..n {
            out[i][c] = (proj[i] - lo) / span;
        }
    }
    Ok(out)
}

/// Side-by-side `[reconstruction | rendering]` PCA image of one layer, each
/// token drawn as a `cell × cell` block.
fn pca_image(recon: &Array<f32>, rend: &Array<f32>, gh: usize, gw: usize, cell: usize) -> Result<Array<f32>> {
    let d = recon.shape()[1];
    let rows: Vec<Vec<f64>> = recon
        .data()
        .chunks_exact(d)
        .chain(rend.data().chunks_exact(d))
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let rgb = pca_rgb(&rows)?;
    let (h, w) = (gh * cell, 2 * gw * cell);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (branch, gx) = (x / (gw * cell), (x % (gw * cell)) / cell);
            let token = branch * gh * gw + (y / cell) * gw + gx;
            for c in 0..3 {
                data[c * h * w + y * w + x] = rgb[token][c] as f32;
            }
        }
    }
    Array::new(&[3, h, w], data)
}

/// Per-layer alignment between the two branches' cross-attention outputs at
/// context view `view` (an index into `context`). Writes
/// `alignment.csv` and, with `pca`, one `pca_layer_<l>.ppm` per layer.
pub fn feature_alignment(
    model: &Model<f32>,
    scene: &SceneData,
    context: &[usize],
    view: usize,
    out_dir: Option<&Path>,
    pca: bool,
) -> Result<Vec<LayerAlignment>> {
    if view >= context.len() {
        return Err(Error::Invalid(format!("view {view} out of range for {} context views", context.len())));
    }
    let images: Vec<_> = context.iter().map(|&i| scene.images[i].clone()).collect();
    let cams: Vec<_> = context.iter().map(|&i| scene.cameras[i].clone()).collect();
    let reference = model.reconstruct(&images, &cams)?.content_hash();
    let mut rows = Vec::with_capacity(model.cfg.layers);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for layer in 0..model.cfg.layers {
        let pair = model.attended_features(&images, &cams, view, layer)?;
        if pair.cache_hash != reference {
            return Err(Error::Invalid(format!("layer {layer}: branches read a different cache than reconstruct builds")));
        }
        let (mean_cos, std_cos) = cosine_stats(&pair.recon, &pair.rend)?;
        rows.push(LayerAlignment { layer, mean_cos, std_cos });
        if let (Some(dir), true) = (out_dir, pca) {
            let res = scene.images[0].shape()[1];
            let grid = res / model.cfg.p2;
            let img = pca_image(&pair.recon, &pair.rend, grid, grid, model.cfg.p2)?;
            ppm::write(&dir.join(format!("pca_layer_{layer}.ppm")), &img)?;
        }
    }
    if let Some(dir) = out_dir {
        write_alignment_csv(&rows, &dir.join("alignment.csv"))?;
    }
    Ok(rows)
}

pub fn write_alignment_csv(rows: &[LayerAlignment], path: &Path) -> Result<()> {
    let mut out = String::from("layer,mean_cos,std_cos\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.9},{:.9}", r.layer, r.mean_cos, r.std_cos);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean per-layer difference `shared − decoupled` of `mean_cos`.
pub fn alignment_gap(shared: &[LayerAlignment], decoupled: &[LayerAlignment]) -> f64 {
    let n = shared.len().min(decoupled.len()).max(1) as f64;
    shared.iter().zip(decoupled).map(|(a, b)| a.mean_cos - b.mean_cos).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        for seed in 0..10 {
            let a = random(30, 16, seed);
            assert_eq!(cosine_stats(&a, &a).unwrap(), (1.0, 0.0));
        }
    }

    #[test]
    fn opposite_and_bounded() {
        let a = random(20, 8, 1);
        let neg = a.map(|v| -v);
        assert_eq!(cosine_stats(&a, &neg).unwrap().0, -1.0);
        let (m, s) = cosine_stats(&a, &random(20, 8, 2)).unwrap();
        assert!((-1.0..=1.0).contains(&m) && s >= 0.0);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 0.01 * ((i * 7) % 5) as f64, 0.0, 0.0]).collect();
        let rgb = pca_rgb(&rows).unwrap();
        let first: Vec<f64> = rgb.iter().map(|c| c[0]).collect();
        let increasing = first.windows(2).all(|w| w[1] > w[0]);
        let decreasing = first.windows(2).all(|w| w[1] < w[0]);
        assert!(increasing || decreasing);
        assert!(rgb.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
