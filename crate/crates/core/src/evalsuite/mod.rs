//! Image metrics, held-out evaluation, feature alignment, ablations and
//! timing benchmarks.

pub mod ablation;
pub mod bench;
mod eval;
pub mod features;
pub mod metrics;

pub use ablation::{ablation_csv, ablation_run, ablation_variants, AblationOptions, AblationRow, Variant, ABLATION_HEADER};
pub use bench::{bench, bench_csv, write_bench_csv, BenchRow, BENCH_HEADER, BENCH_RUNS};
pub use eval::{eval_dataset, eval_split, evaluate, write_report, Aggregate, ContextMean, EvalReport, GroundTruth, Predictor, SceneReport, TargetMetrics};
pub use features::{alignment_gap, cosine_stats, feature_alignment, pca_rgb, write_alignment_csv, LayerAlignment};
pub use metrics::{luma, mse, psnr, ssim, Psnr};
