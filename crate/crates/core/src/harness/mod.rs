//! Datasets, image files, metrics, evaluation, benchmarking and the
//! train/sample/eval/bench commands built on them.

mod bench;
mod data;
mod eval;
mod metrics;
mod png;
mod run;

pub use bench::{bench_heads, BenchReport};
pub use data::{class_means, ingest, Dataset, DatasetSpec};
pub use eval::{colour_moments, evaluate, frechet_distance, frechet_rgb, psnr, ClassPsnr, EvalReport, PSNR_CAP_DB};
pub use metrics::{moving_average, read_metrics, MetricsLog};
pub use png::{default_cols, emit_png, from_u8, load_image, render_grid, to_u8};
pub use run::{
    bench_run, eval_run, load_dataset, load_model, output_root, sample_run, train_run, OutputLock, SampleRequest,
    TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, OUT_ENV,
};
