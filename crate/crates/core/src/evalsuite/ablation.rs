use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::eval_dataset;
use crate::error::{Error, Result};
use crate::model::{count_params, BlockVariant, Decouple, Model, ModelConfig, PriorConfig, PriorKind};
use crate::scenes::SceneDataset;
use crate::train::{init_weights, run_training, RunOptions, TrainConfig};

pub const ABLATION_HEADER: &str = "variant,params,psnr,ssim,recon_seconds,render_fps";

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub id: &'static str,
    pub label: &'static str,
    pub cfg: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub params: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub recon_seconds: Option<f64>,
    pub render_fps: Option<f64>,
}

/// The twelve ablation variants (a)–(l) derived from `base`. The base's
/// own decoupling, view mixing and block layout are reset first.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    let mut shared = base.clone();
    shared.decouple.clear();
    shared.recon_cross_view = true;
    shared.block_variant = BlockVariant::Full;
    shared.prior = PriorConfig::default();
    let decoupled = |flag| shared.clone().with_decouple(&[flag]);
    let no_cross = |flags: &[Decouple]| ModelConfig {
        recon_cross_view: false,
        ..shared.clone().with_decouple(flags)
    };
    let prior = |tunable| ModelConfig {
        prior: PriorConfig {
            kind: PriorKind::RandomFeaturizer,
            tunable,
            seed: base.prior.seed,
            ..PriorConfig::default()
        },
        ..shared.clone()
    };
    let block = |b| ModelConfig {
        block_variant: b,
        ..shared.clone()
    };
    vec![
        Variant { id: "a", label: "shared", cfg: shared.clone() },
        Variant { id: "b", label: "decouple input_proj", cfg: decoupled(Decouple::InputProj) },
        Variant { id: "c", label: "decouple intra_attn", cfg: decoupled(Decouple::IntraAttn) },
        Variant { id: "d", label: "decouple cross_qo", cfg: decoupled(Decouple::CrossQo) },
        Variant { id: "e", label: "decouple ffn", cfg: decoupled(Decouple::Ffn) },
        Variant { id: "f", label: "decouple entire_decoder", cfg: decoupled(Decouple::EntireDecoder) },
        Variant { id: "g", label: "no recon cross-view", cfg: no_cross(&[]) },
        Variant { id: "h", label: "no recon cross-view, decoupled", cfg: no_cross(&[Decouple::EntireDecoder]) },
        Variant { id: "i", label: "prior frozen", cfg: prior(false) },
        Variant { id: "j", label: "prior tunable", cfg: prior(true) },
        Variant { id: "k", label: "no mid ffn", cfg: block(BlockVariant::NoMidFfn) },
        Variant { id: "l", label: "no intra attn", cfg: block(BlockVariant::NoIntra) },
    ]
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    /// Construct and count only; no training or evaluation.
    pub dry: bool,
    pub context_k: usize,
    pub eval_seed: u64,
    /// Evaluation resolution; defaults to the last curriculum phase.
    pub resolution: Option<usize>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            r.params,
            opt(r.psnr),
            opt(r.ssim),
            opt(r.recon_seconds),
            opt(r.render_fps)
        );
    }
    out
}

/// Trains and evaluates every variant under the same training config and
/// seed, one subdirectory per variant, and writes `ablation.csv`. All
/// variants are constructed before any training starts.
pub fn ablation_run(
    base: &ModelConfig,
    tc: &TrainConfig,
    ds: Option<&SceneDataset>,
    opts: &AblationOptions,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(base);
    for v in &variants {
        let fail = |e: Error| Error::Config(format!("variant ({}) {}: {e}", v.id, v.label));
        v.cfg.validate().map_err(fail)?;
        if !opts.dry {
            tc.validate(&v.cfg).map_err(fail)?;
            Model::<f32>::new(v.cfg.clone(), init_weights(&v.cfg, tc.seed)).map_err(fail)?;
        }
    }
    let ds = match (opts.dry, ds) {
        (true, _) => None,
        (false, Some(ds)) => Some(ds),
        (false, None) => return Err(Error::Config("ablation training needs a dataset".into())),
    };
    let resolution = opts
        .resolution
        .or_else(|| tc.curriculum.last().map(|p| p.resolution))
        .unwrap_or(0);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in &variants {
        let mut row = AblationRow {
            variant: v.id.into(),
            label: v.label.into(),
            params: count_params(&v.cfg).total,
            psnr: None,
            ssim: None,
            recon_seconds: None,
            render_fps: None,
        };
        if let Some(ds) = ds {
            let dir = out_dir.ok_or_else(|| Error::Config("ablation training needs an output directory".into()))?;
            let run_dir = dir.join(format!("variant_{}", v.id));
            log::info!("ablation ({}) {}: training", v.id, v.label);
            let outcome = run_training(tc, ds, &v.cfg, &run_dir, &RunOptions::default())?;
            let report = eval_dataset(&outcome.model, ds, opts.context_k, opts.eval_seed, resolution, Some(&run_dir.join("eval")))?;
            row.psnr = Some(report.aggregate.psnr_db);
            row.ssim = Some(report.aggregate.ssim);
            row.recon_seconds = Some(report.aggregate.recon_seconds);
            row.render_fps = Some(report.aggregate.render_fps);
        }
        rows.push(row);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("ablation.csv");
        fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(cfg: &ModelConfig) -> Vec<(String, usize)> {
        let rows = ablation_run(
            cfg,
            &TrainConfig::default(),
            None,
            &AblationOptions {
                dry: true,
                context_k: 8,
                eval_seed: 0,
                resolution: None,
            },
            None,
        )
        .unwrap();
        rows.into_iter().map(|r| (r.variant, r.params)).collect()
    }

    #[test]
    fn dry_run_orderings_match_table() {
        for cfg in [ModelConfig::new(768, 12, 12, 8, 8), ModelConfig::new(64, 4, 4, 4, 4)] {
            let p = params(&cfg);
            assert_eq!(p.len(), 12);
            let get = |id: &str| p.iter().find(|(v, _)| v == id).unwrap().1;
            let order = ["f", "e", "c", "d", "b", "a", "k", "l"];
            for w in order.windows(2) {
                assert!(get(w[0]) > get(w[1]), "({}) {} vs ({}) {}", w[0], get(w[0]), w[1], get(w[1]));
            }
            let (d, l) = (cfg.dim, cfg.layers);
            assert_eq!(get("d") - get("a"), 2 * d * d * l);
        }
    }

    #[test]
    fn csv_leaves_untrained_columns_empty() {
        let base = ModelConfig::new(16, 1, 2, 4, 4);
        let dir = tempfile::tempdir().unwrap();
        let opts = AblationOptions {
            dry: true,
            context_k: 2,
            eval_seed: 0,
            resolution: None,
        };
        ablation_run(&base, &TrainConfig::default(), None, &opts, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], ABLATION_HEADER);
        assert_eq!(lines.len(), 13);
        assert!(lines[1].starts_with("a,") && lines[1].ends_with(",,,,"));
    }

    #[test]
    fn invalid_variant_aborts_before_training() {
        let base = ModelConfig::new(16, 1, 3, 4, 4);
        let opts = AblationOptions {
            dry: true,
            context_k: 2,
            eval_seed: 0,
            resolution: None,
        };
        let err = ablation_run(&base, &TrainConfig::default(), None, &opts, None).unwrap_err();
        assert!(err.to_string().contains("variant (a)"), "{err}");
    }
}
