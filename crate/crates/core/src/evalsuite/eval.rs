use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim};
use crate::error::{Error, Result};
use crate::geometry::{kmeans_select_views, Camera};
use crate::model::{count_params, Model, ModelConfig};
use crate::scenes::{ppm, SceneData, SceneDataset};
use crate::tensor::Array;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub frame: usize,
    pub psnr_db: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: usize,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    pub psnr_db: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    pub per_target: Vec<TargetMetrics>,
    pub recon_seconds: f64,
    pub render_fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    /// Reserved; no learned perceptual metric is computed.
    pub lpips: Option<f64>,
    pub recon_seconds: f64,
    pub render_fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: Option<ModelConfig>,
    pub param_count: Option<usize>,
    pub context_k: usize,
    pub seed: u64,
    pub resolution: usize,
    pub scenes: Vec<SceneReport>,
    pub aggregate: Aggregate,
    /// Reconstruction time covers tokenization and the full reconstruction
    /// pass; render rate is single frames without batching.
    pub timing_note: String,
}

/// A view predictor under the evaluation protocol: `prepare` sees the
/// context once per scene, `predict` renders one target camera.
pub trait Predictor {
    type State;
    fn prepare(&mut self, scene: &SceneData, context: &[usize]) -> Result<Self::State>;
    fn predict(&mut self, state: &Self::State, scene: &SceneData, cam: &Camera) -> Result<Array<f32>>;
}

impl Predictor for &Model<f32> {
    type State = crate::model::SceneKVCache<f32>;

    fn prepare(&mut self, scene: &SceneData, context: &[usize]) -> Result<Self::State> {
        let images: Vec<_> = context.iter().map(|&i| scene.images[i].clone()).collect();
        let cams: Vec<_> = context.iter().map(|&i| scene.cameras[i].clone()).collect();
        self.reconstruct(&images, &cams)
    }

    fn predict(&mut self, state: &Self::State, _scene: &SceneData, cam: &Camera) -> Result<Array<f32>> {
        self.render(state, cam)
    }
}

/// Per-pixel mean of the context images, whatever the query camera.
pub struct ContextMean;

impl Predictor for ContextMean {
    type State = Array<f32>;

    fn prepare(&mut self, scene: &SceneData, context: &[usize]) -> Result<Array<f32>> {
        let first = &scene.images[context[0]];
        let mut acc = vec![0f64; first.len()];
        for &i in context {
            for (a, &v) in acc.iter_mut().zip(scene.images[i].data()) {
                *a += v as f64;
            }
        }
        let n = context.len() as f64;
        Array::new(first.shape(), acc.into_iter().map(|v| (v / n) as f32).collect())
    }

    fn predict(&mut self, state: &Array<f32>, _: &SceneData, _: &Camera) -> Result<Array<f32>> {
        Ok(state.clone())
    }
}

/// Returns the stored ground truth of the queried frame.
pub struct GroundTruth;

impl Predictor for GroundTruth {
    type State = ();

    fn prepare(&mut self, _: &SceneData, _: &[usize]) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, _: &(), scene: &SceneData, cam: &Camera) -> Result<Array<f32>> {
        let k = scene
            .cameras
            .iter()
            .position(|c| c == cam)
            .ok_or_else(|| Error::Invalid("camera is not a dataset frame".into()))?;
        Ok(scene.images[k].clone())
    }
}

/// Held-out targets and K-means context of one scene. Targets are never
/// part of the context.
pub fn eval_split(scene: &SceneData, context_k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let targets = scene.target_eligible.clone();
    let pool = scene.context_pool();
    if context_k == 0 || context_k > pool.len() {
        return Err(Error::Invalid(format!(
            "context_k {context_k} exceeds the {} non-target frames of scene {}",
            pool.len(),
            scene.id
        )));
    }
    let cams: Vec<Camera> = pool.iter().map(|&i| scene.cameras[i].clone()).collect();
    let picked = kmeans_select_views(&cams, context_k, seed)?;
    Ok((picked.into_iter().map(|i| pool[i]).collect(), targets))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs `predictor` over the test split at `resolution`, optionally writing
/// `report.json` and one PPM per rendered target into `out_dir`.
pub fn evaluate<P: Predictor>(
    predictor: &mut P,
    ds: &SceneDataset,
    context_k: usize,
    seed: u64,
    resolution: usize,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut scenes = Vec::new();
    for &id in &ds.manifest.split.test {
        let scene = ds.load_scene(id, resolution)?;
        let (context, targets) = eval_split(&scene, context_k, seed)?;
        let t0 = Instant::now();
        let state = predictor.prepare(&scene, &context)?;
        let recon_seconds = t0.elapsed().as_secs_f64();
        let mut per_target = Vec::new();
        let mut render_seconds = 0.0;
        for &k in &targets {
            let t1 = Instant::now();
            let pred = predictor.predict(&state, &scene, &scene.cameras[k])?;
            render_seconds += t1.elapsed().as_secs_f64();
            let p = psnr(&pred, &scene.images[k], 1.0)?;
            per_target.push(TargetMetrics {
                frame: k,
                psnr_db: p.db,
                psnr_capped: p.capped,
                ssim: ssim(&pred, &scene.images[k])?,
            });
            if let Some(dir) = out_dir {
                ppm::write(&dir.join(format!("scene_{id:04}_frame_{k:03}.ppm")), &pred)?;
            }
        }
        scenes.push(SceneReport {
            scene: id,
            psnr_db: mean(per_target.iter().map(|t| t.psnr_db)),
            psnr_capped: per_target.iter().any(|t| t.psnr_capped),
            ssim: mean(per_target.iter().map(|t| t.ssim)),
            context,
            recon_seconds,
            render_fps: targets.len() as f64 / render_seconds.max(1e-9),
            targets,
            per_target,
        });
    }
    let aggregate = Aggregate {
        psnr_db: mean(scenes.iter().map(|s| s.psnr_db)),
        psnr_capped: scenes.iter().any(|s| s.psnr_capped),
        ssim: mean(scenes.iter().map(|s| s.ssim)),
        lpips: None,
        recon_seconds: mean(scenes.iter().map(|s| s.recon_seconds)),
        render_fps: mean(scenes.iter().map(|s| s.render_fps)),
    };
    let report = EvalReport {
        model: None,
        param_count: None,
        context_k,
        seed,
        resolution,
        scenes,
        aggregate,
        timing_note: "recon_seconds includes tokenization; render_fps is single-frame, unbatched".into(),
    };
    if let Some(dir) = out_dir {
        write_report(&report, &dir.join("report.json"))?;
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Model evaluation under the held-out protocol.
pub fn eval_dataset(
    model: &Model<f32>,
    ds: &SceneDataset,
    context_k: usize,
    seed: u64,
    resolution: usize,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let mut report = evaluate(&mut &*model, ds, context_k, seed, resolution, out_dir)?;
    report.model = Some(model.cfg.clone());
    report.param_count = Some(count_params(&model.cfg).total);
    if let Some(dir) = out_dir {
        write_report(&report, &dir.join("report.json"))?;
    }
    Ok(report)
}
