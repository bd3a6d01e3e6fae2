use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::TrainConfig;
use super::init::init_weights;
use super::loss::perceptual_featurizer;
use super::step::{train_step, SceneBatch, StepStats};
use crate::error::{Error, Result};
use crate::geometry::{sample_context_target, ViewSampling};
use crate::model::config::fnv1a64;
use crate::model::{Model, ModelConfig};
use crate::scenes::{SceneData, SceneDataset};
use crate::tensor::io::Container;
use crate::tensor::optim::{AdamW, Moments};
use crate::tensor::Array;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,phase,lr,loss,mse,percep,wallclock_ms";
pub const FINAL_CHECKPOINT: &str = "model.dvsm";

/// Independent seed for the named random stream `name` (and optional index)
/// derived from a master seed.
pub fn substream(seed: u64, name: &str, index: u64) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(name.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.dvsm"))
}

/// Optimizer-state sibling of a checkpoint file.
pub fn optimizer_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("opt")
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoint to continue from; its step count is the starting step.
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (checkpointing the stop point).
    pub stop_after: Option<u64>,
    /// Log progress every this many steps (0 = silent).
    pub log_every: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub steps_done: u64,
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<StepStats>,
    pub metrics: PathBuf,
}

pub fn save_optimizer(opt: &AdamW<f32>, path: &Path) -> Result<()> {
    let mut c = Container::new(json!({
        "kind": "adamw_state",
        "step": opt.step,
        "config": opt.config,
    }));
    for (name, st) in &opt.moments {
        c.tensors.push((format!("m.{name}"), Array::new(&[st.m.len()], st.m.clone())?));
        c.tensors.push((format!("v.{name}"), Array::new(&[st.v.len()], st.v.clone())?));
    }
    c.write(path)
}

pub fn load_optimizer(path: &Path) -> Result<AdamW<f32>> {
    let c = Container::read(path)?;
    if c.metadata["kind"] != "adamw_state" {
        return Err(Error::Format(format!("{} is not an optimizer state file", path.display())));
    }
    let mut opt = AdamW::new(serde_json::from_value(c.metadata["config"].clone())?);
    opt.step = c.metadata["step"]
        .as_u64()
        .ok_or_else(|| Error::Format("optimizer state lacks step".into()))?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, a) in &c.tensors {
        if let Some(n) = name.strip_prefix("m.") {
            m.insert(n.to_string(), a.to_vec());
        } else if let Some(n) = name.strip_prefix("v.") {
            v.insert(n.to_string(), a.to_vec());
        }
    }
    for (name, mm) in m {
        let vv = v
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("optimizer state lacks v.{name}")))?;
        opt.moments.insert(name, Moments { m: mm, v: vv });
    }
    Ok(opt)
}

/// Frames a scene may contribute to training. Target-eligible frames of
/// scenes that are also evaluated are held out.
fn frame_pool(ds: &SceneDataset, id: usize) -> Result<Vec<usize>> {
    let entry = ds.entry(id)?;
    let held_out = ds.manifest.split.test.contains(&id);
    Ok((0..entry.frames)
        .filter(|k| !(held_out && entry.target_eligible.contains(k)))
        .collect())
}

fn sampling(tc: &TrainConfig, views: usize) -> ViewSampling {
    ViewSampling {
        context_views: views,
        skip_min: tc.skip_min,
        skip_max: tc.skip_max,
        target_views: tc.target_views,
        margin: tc.target_margin,
    }
}

struct Sampler<'a> {
    tc: &'a TrainConfig,
    train: Vec<usize>,
    pools: BTreeMap<usize, Vec<usize>>,
}

impl<'a> Sampler<'a> {
    fn new(tc: &'a TrainConfig, ds: &SceneDataset) -> Result<Self> {
        let train = ds.manifest.split.train.clone();
        if train.is_empty() {
            return Err(Error::Config("dataset has no training scenes".into()));
        }
        let mut pools = BTreeMap::new();
        for &id in &train {
            let pool = frame_pool(ds, id)?;
            for &v in &tc.context_views {
                sample_context_target(pool.len(), &sampling(tc, v), 0).map_err(|e| {
                    Error::Config(format!("scene {id} ({} usable frames) cannot supply {v} context views: {e}", pool.len()))
                })?;
            }
            pools.insert(id, pool);
        }
        Ok(Sampler { tc, train, pools })
    }

    /// Scene ids with context and target frame indices for 0-based `step`.
    fn draw(&self, step: u64) -> Result<Vec<(usize, Vec<usize>, Vec<usize>)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(self.tc.seed, "sampler", step));
        (0..self.tc.batch_scenes)
            .map(|_| {
                let id = self.train[rng.gen_range(0..self.train.len())];
                let v = self.tc.context_views[rng.gen_range(0..self.tc.context_views.len())];
                let pool = &self.pools[&id];
                let (c, t) = sample_context_target(pool.len(), &sampling(self.tc, v), rng.gen())?;
                Ok((id, c.iter().map(|&i| pool[i]).collect(), t.iter().map(|&i| pool[i]).collect()))
            })
            .collect()
    }
}

fn build_batch(scene: &SceneData, ctx: &[usize], tgt: &[usize]) -> Result<SceneBatch<f32>> {
    let pick_img = |ix: &[usize]| ix.iter().map(|&i| scene.images[i].clone()).collect::<Vec<_>>();
    let pick_cam = |ix: &[usize]| ix.iter().map(|&i| scene.cameras[i].clone()).collect::<Vec<_>>();
    SceneBatch::from_world(pick_img(ctx), &pick_cam(ctx), pick_img(tgt), &pick_cam(tgt))
}

fn metrics_row(out: &mut String, step: u64, phase: usize, lr: f64, s: &StepStats, ms: f64) {
    let _ = writeln!(out, "{step},{phase},{lr:e},{:e},{:e},{:e},{ms:.3}", s.loss, s.mse, s.percep);
}

/// Keeps the header and the first `rows` data rows of an existing log.
fn truncated_log(path: &Path, rows: u64) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1).take(rows as usize) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains `mc` on the training split of `ds` following `tc`, writing the
/// metrics log and checkpoints into `out_dir`.
pub fn run_training(tc: &TrainConfig, ds: &SceneDataset, mc: &ModelConfig, out_dir: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    mc.validate()?;
    tc.validate(mc)?;
    for p in &tc.curriculum {
        if !ds.resolutions().contains(&p.resolution) {
            return Err(Error::Config(format!(
                "curriculum resolution {} not in dataset resolutions {:?}",
                p.resolution,
                ds.resolutions()
            )));
        }
    }
    let sampler = Sampler::new(tc, ds)?;
    let total = tc.total_steps();
    let stop = opts.stop_after.unwrap_or(total).min(total);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut model, mut opt, start) = match &opts.resume {
        Some(path) => {
            let c = Container::read(path)?;
            let model = Model::<f32>::from_container(&c)?;
            if model.cfg.hash() != mc.hash() {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model config", path.display())));
            }
            let step = c.metadata["step"]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("{} lacks a step count", path.display())))?;
            (model, load_optimizer(&optimizer_path(path))?, step)
        }
        None => {
            let weights = init_weights(mc, substream(tc.seed, "init", 0));
            (Model::new(mc.clone(), weights)?, AdamW::new(tc.adamw), 0)
        }
    };

    let metrics = out_dir.join(METRICS_FILE);
    let mut log = truncated_log(&metrics, if opts.resume.is_some() { start } else { 0 })?;
    let percep = perceptual_featurizer::<f32>(mc.p2);
    let phase_ends = tc.phase_ends();
    let mut loaded: Option<(usize, BTreeMap<usize, SceneData>)> = None;
    let mut checkpoints = Vec::new();
    let mut history = Vec::new();

    for step in start..stop {
        let phase = tc.phase_of(step).expect("step below total");
        let res = tc.curriculum[phase].resolution;
        if loaded.as_ref().map_or(true, |(r, _)| *r != res) {
            let scenes = sampler
                .train
                .iter()
                .map(|&id| Ok((id, ds.load_scene(id, res)?)))
                .collect::<Result<_>>()?;
            loaded = Some((res, scenes));
        }
        let scenes = &loaded.as_ref().unwrap().1;
        let batch = sampler
            .draw(step)?
            .iter()
            .map(|(id, c, t)| build_batch(&scenes[id], c, t))
            .collect::<Result<Vec<_>>>()?;
        let lr = tc.lr_at(step)?;
        let t0 = Instant::now();
        let stats = train_step(&mut model, &mut opt, &batch, lr, tc.lambda, &percep, tc.grad_clip)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("training step {}: {m}", step + 1)),
                other => other,
            })?;
        let ms = if tc.log_wallclock { t0.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let done = step + 1;
        metrics_row(&mut log, done, phase, lr, &stats, ms);
        history.push(stats);
        if opts.log_every > 0 && done % opts.log_every == 0 {
            log::info!("step {done}/{total} phase {phase} lr {lr:.2e} loss {:.5} ({ms:.0} ms)", stats.loss);
        }
        let boundary = phase_ends.contains(&done) || done == stop;
        if boundary || (tc.checkpoint_interval > 0 && done % tc.checkpoint_interval == 0) {
            let path = checkpoint_path(out_dir, done);
            model.save(&path, json!({ "step": done, "train": tc }))?;
            save_optimizer(&opt, &optimizer_path(&path))?;
            fs::write(&metrics, &log).map_err(|e| Error::io(&metrics, e))?;
            checkpoints.push(path);
        }
    }
    fs::write(&metrics, &log).map_err(|e| Error::io(&metrics, e))?;
    if stop == total {
        let path = out_dir.join(FINAL_CHECKPOINT);
        model.save(&path, json!({ "step": total, "train": tc }))?;
        save_optimizer(&opt, &optimizer_path(&path))?;
    }
    Ok(TrainOutcome {
        model,
        opt,
        steps_done: stop,
        checkpoints,
        history,
        metrics,
    })
}
