use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::eval_split;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scenes::SceneData;

pub const BENCH_RUNS: usize = 5;
pub const BENCH_HEADER: &str = "views,recon_median_s,render_fps_median,peak_rss_kb,recon_runs_s,render_runs_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub views: usize,
    pub recon_runs: Vec<f64>,
    pub render_runs: Vec<f64>,
    pub recon_median_s: f64,
    pub render_fps_median: f64,
    pub peak_rss_kb: Option<u64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Peak resident set size of this process, where the platform exposes it.
pub fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Reconstruction time per context size in `views` and single-frame render
/// rate, each the median of [`BENCH_RUNS`] runs after one warm-up.
pub fn bench(model: &Model<f32>, scene: &SceneData, views: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let target = *scene
        .target_eligible
        .first()
        .ok_or_else(|| Error::Invalid(format!("scene {} has no target frame", scene.id)))?;
    let cam = &scene.cameras[target];
    let mut rows = Vec::with_capacity(views.len());
    for &v in views {
        let (context, _) = eval_split(scene, v, seed)?;
        let images: Vec<_> = context.iter().map(|&i| scene.images[i].clone()).collect();
        let cams: Vec<_> = context.iter().map(|&i| scene.cameras[i].clone()).collect();
        let cache = model.reconstruct(&images, &cams)?;
        model.render(&cache, cam)?;
        let mut recon_runs = Vec::with_capacity(BENCH_RUNS);
        let mut render_runs = Vec::with_capacity(BENCH_RUNS);
        for _ in 0..BENCH_RUNS {
            let t0 = Instant::now();
            let cache = model.reconstruct(&images, &cams)?;
            recon_runs.push(t0.elapsed().as_secs_f64());
            let t1 = Instant::now();
            model.render(&cache, cam)?;
            render_runs.push(t1.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            views: v,
            recon_median_s: median(&recon_runs),
            render_fps_median: 1.0 / median(&render_runs).max(1e-12),
            peak_rss_kb: peak_rss_kb(),
            recon_runs,
            render_runs,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";");
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.3},{},{},{}",
            r.views,
            r.recon_median_s,
            r.render_fps_median,
            r.peak_rss_kb.map_or(String::new(), |k| k.to_string()),
            join(&r.recon_runs),
            join(&r.render_runs)
        );
    }
    out
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    fs::write(path, bench_csv(rows)).map_err(|e| Error::io(path, e))
}
