use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dvsm::evalsuite::{
    ablation_run, alignment_gap, bench as run_bench, eval_dataset, eval_split, feature_alignment, psnr, write_alignment_csv,
    write_bench_csv, AblationOptions,
};
use dvsm::geometry::Camera;
use dvsm::model::Model;
use dvsm::scenes::{make_dataset, ppm, SceneDataset};
use dvsm::train::{run_training, substream, RunOptions};
use serde_json::json;

use crate::checks;
use crate::config::RunConfig;
use crate::CliError;

pub struct Context {
    pub cfg: RunConfig,
    /// The model section came from the user rather than the defaults.
    pub explicit_model: bool,
    pub threads: usize,
}

impl Context {
    fn provenance(&self, dir: &Path) -> Result<(), CliError> {
        if self.threads > 1 {
            log::info!("DVSM_THREADS={} requested; kernels run single-threaded and results do not depend on it", self.threads);
        }
        self.cfg.write_resolved(dir, self.threads)
    }

    fn dataset(&self) -> Result<SceneDataset, CliError> {
        let root = Path::new(&self.cfg.data.path);
        SceneDataset::open(root).map_err(|e| {
            CliError::Runtime(format!("cannot open dataset at {} ({e}); run `dvsm gen-data` first", root.display()))
        })
    }

    fn load_model(&self, path: &Path) -> Result<Model<f32>, CliError> {
        let model = Model::<f32>::load(path)?;
        if self.explicit_model && model.cfg.hash() != self.cfg.model.hash() {
            return Err(CliError::Runtime(format!(
                "checkpoint {} has model hash {:016x}, configuration expects {:016x}",
                path.display(),
                model.cfg.hash(),
                self.cfg.model.hash()
            )));
        }
        Ok(model)
    }

    fn out_or(&self, out: Option<PathBuf>, sub: &str) -> PathBuf {
        out.unwrap_or_else(|| self.cfg.output_dir().join(sub))
    }

    fn eval_seed(&self) -> u64 {
        substream(self.cfg.seed, "eval", 0)
    }

    fn first_test_scene(&self, ds: &SceneDataset, scene: Option<usize>) -> Result<usize, CliError> {
        match scene {
            Some(id) if id < ds.len() => Ok(id),
            Some(id) => Err(CliError::Runtime(format!("scene {id} out of range for {} scenes", ds.len()))),
            None => ds
                .manifest
                .split
                .test
                .first()
                .copied()
                .ok_or_else(|| CliError::Runtime("dataset has no test scenes".into())),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn gen_data(ctx: &Context, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| PathBuf::from(&ctx.cfg.data.path));
    let ds_cfg = ctx.cfg.dataset_config();
    ds_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let t0 = Instant::now();
    let ds = make_dataset(&ds_cfg, &dir)?;
    ctx.provenance(&dir)?;
    println!(
        "generated {} scenes ({} train / {} test) at {} in {:.1}s",
        ds.len(),
        ds.manifest.split.train.len(),
        ds.manifest.split.test.len(),
        dir.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train(ctx: &Context, resume: Option<PathBuf>, stop_after: Option<u64>, log_every: u64) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let out = ctx.cfg.output_dir();
    ctx.provenance(&out)?;
    let opts = RunOptions {
        resume,
        stop_after,
        log_every,
    };
    let r = run_training(&ctx.cfg.train, &ds, &ctx.cfg.model, &out, &opts)?;
    let last = r.history.last().map_or(f64::NAN, |s| s.loss);
    println!("trained to step {} (final loss {last:.6}); metrics at {}", r.steps_done, r.metrics.display());
    Ok(())
}

pub struct RenderRequest {
    pub checkpoint: PathBuf,
    pub scene_dir: PathBuf,
    pub camera: Option<usize>,
    pub camera_json: Option<PathBuf>,
    pub context: Option<usize>,
    pub resolution: Option<usize>,
    pub out: PathBuf,
}

pub fn render(ctx: &Context, req: RenderRequest) -> Result<(), CliError> {
    let model = ctx.load_model(&req.checkpoint)?;
    let dir = req.scene_dir.canonicalize().map_err(|e| CliError::Runtime(format!("{}: {e}", req.scene_dir.display())))?;
    let root = dir.parent().ok_or_else(|| CliError::Runtime("scene directory has no parent".into()))?;
    let ds = SceneDataset::open(root)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let id = ds
        .manifest
        .scenes
        .iter()
        .find(|e| e.dir == name)
        .map(|e| e.id)
        .ok_or_else(|| CliError::Runtime(format!("{} is not a scene of dataset {}", name, root.display())))?;
    let res = req.resolution.unwrap_or_else(|| ctx.cfg.eval_resolution());
    let scene = ds.load_scene(id, res)?;
    let (cam, truth) = match (req.camera, &req.camera_json) {
        (Some(k), _) => {
            let cam = scene.cameras.get(k).cloned().ok_or_else(|| {
                CliError::Runtime(format!("camera index {k} out of range: scene {id} has {} frames", scene.cameras.len()))
            })?;
            (cam, Some(scene.images[k].clone()))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            let cam: Camera = serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            cam.validate()?;
            (cam.scaled_to(res, res), None)
        }
        (None, None) => return Err(CliError::Usage("render needs --camera or --camera-json".into())),
    };
    let k = req.context.unwrap_or(ctx.cfg.eval.context_k);
    let (context, _) = eval_split(&scene, k, ctx.eval_seed())?;
    let images: Vec<_> = context.iter().map(|&i| scene.images[i].clone()).collect();
    let cams: Vec<_> = context.iter().map(|&i| scene.cameras[i].clone()).collect();
    let img = model.render(&model.reconstruct(&images, &cams)?, &cam)?;
    if let Some(parent) = req.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ctx.provenance(parent)?;
    } else {
        ctx.provenance(Path::new("."))?;
    }
    ppm::write(&req.out, &img)?;
    match truth {
        Some(gt) => {
            let p = psnr(&img, &gt, 1.0)?;
            println!("wrote {} (psnr_db {:.3}{})", req.out.display(), p.db, if p.capped { ", capped" } else { "" });
        }
        None => println!("wrote {}", req.out.display()),
    }
    Ok(())
}

pub fn eval(ctx: &Context, checkpoint: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    if ctx.cfg.eval.split != "test" {
        return Err(CliError::Usage(format!("eval.split `{}` unsupported; only `test` is evaluated", ctx.cfg.eval.split)));
    }
    let model = ctx.load_model(checkpoint)?;
    let ds = ctx.dataset()?;
    let dir = ctx.out_or(out, "eval");
    ctx.provenance(&dir)?;
    let r = eval_dataset(&model, &ds, ctx.cfg.eval.context_k, ctx.eval_seed(), ctx.cfg.eval_resolution(), Some(&dir))?;
    println!(
        "psnr_db {:.3} ssim {:.4} over {} scenes (recon {:.3}s, {:.1} fps); report at {}",
        r.aggregate.psnr_db,
        r.aggregate.ssim,
        r.scenes.len(),
        r.aggregate.recon_seconds,
        r.aggregate.render_fps,
        dir.join("report.json").display()
    );
    Ok(())
}

pub fn ablate(ctx: &Context, dry: bool, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = ctx.out_or(out, "ablate");
    let ds = if dry { None } else { Some(ctx.dataset()?) };
    ctx.provenance(&dir)?;
    let opts = AblationOptions {
        dry,
        context_k: ctx.cfg.eval.context_k,
        eval_seed: ctx.eval_seed(),
        resolution: Some(ctx.cfg.eval_resolution()),
    };
    let rows = ablation_run(&ctx.cfg.model, &ctx.cfg.train, ds.as_ref(), &opts, Some(&dir))?;
    for r in &rows {
        println!("({}) {:<32} {:>12} params", r.variant, r.label, r.params);
    }
    println!("wrote {}", dir.join("ablation.csv").display());
    Ok(())
}

pub fn analyze_features(
    ctx: &Context,
    checkpoint: &Path,
    compare: Option<&Path>,
    scene: Option<usize>,
    view: usize,
    pca: bool,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let model = ctx.load_model(checkpoint)?;
    let ds = ctx.dataset()?;
    let id = ctx.first_test_scene(&ds, scene)?;
    let data = ds.load_scene(id, ctx.cfg.eval_resolution())?;
    let (context, _) = eval_split(&data, ctx.cfg.eval.context_k, ctx.eval_seed())?;
    let dir = ctx.out_or(out, "features");
    ctx.provenance(&dir)?;
    let rows = feature_alignment(&model, &data, &context, view, Some(&dir), pca)?;
    for r in &rows {
        println!("layer {} mean_cos {:.6} std_cos {:.6}", r.layer, r.mean_cos, r.std_cos);
    }
    let mut summary = json!({ "scene": id, "view": view, "context": context, "layers": rows });
    if let Some(other) = compare {
        let other_model = Model::<f32>::load(other)?;
        let other_rows = feature_alignment(&other_model, &data, &context, view, None, false)?;
        write_alignment_csv(&other_rows, &dir.join("alignment_compare.csv"))?;
        let gap = alignment_gap(&rows, &other_rows);
        println!("alignment gap (this − compared) {gap:.6}");
        summary["compare_layers"] = serde_json::to_value(&other_rows).expect("rows serialize");
        summary["gap"] = json!(gap);
    }
    write_text(&dir.join("alignment.json"), &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    Ok(())
}

pub fn bench(ctx: &Context, checkpoint: &Path, views: &[usize], scene: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let model = ctx.load_model(checkpoint)?;
    let ds = ctx.dataset()?;
    let id = ctx.first_test_scene(&ds, scene)?;
    let data = ds.load_scene(id, ctx.cfg.eval_resolution())?;
    let dir = ctx.out_or(out, "bench");
    ctx.provenance(&dir)?;
    let rows = run_bench(&model, &data, views, ctx.eval_seed())?;
    for r in &rows {
        println!("V={} recon {:.4}s render {:.1} fps", r.views, r.recon_median_s, r.render_fps_median);
    }
    write_bench_csv(&rows, &dir.join("bench.csv"))?;
    Ok(())
}

pub fn selftest() -> Result<(), CliError> {
    let mut failed = 0;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    };
    let (e, worst) = checks::primitive_grad_error(5)?;
    report("primitive gradients", e <= 1e-6, format!("max rel err {e:.2e} ({worst})"));
    let e = checks::micro_model_grad_error(0)?;
    report("micro-model gradients", e <= 1e-4, format!("max rel err {e:.2e}"));
    let d = checks::cache_equivalence(50)?;
    report("kv-cache equivalence", d <= 1e-5, format!("max abs diff {d:.2e} over 50 configs"));
    let d = checks::permutation_invariance(10, 20)?;
    report("permutation invariance", d <= 1e-5, format!("max abs diff {d:.2e}"));
    let s = checks::weight_sharing()?;
    report(
        "weight sharing",
        s.shared_failures.is_empty() && s.decoupled_failures.is_empty(),
        format!(
            "{} shared / {} decoupled parameters checked, failures {:?} {:?}",
            s.shared_checked, s.decoupled_checked, s.shared_failures, s.decoupled_failures
        ),
    );
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
