//! Experiment configuration, the end-to-end pipeline with resumable
//! stages, run manifests and ablation sweeps.

mod config;
mod files;
mod pipeline;
mod sweep;

pub use config::{apply_override, DataConfig, DataSource, EvalConfig, ExperimentConfig, SplitConfig};
pub use files::{evaluate_dirs, load_pose_dir, pose_files, source_stem, write_dataset};
pub use pipeline::{
    eval_seeds, load_dataset, rerun_manifest, run_pipeline, run_pipeline_with, split_indices, training_pairs, PipelineReport,
    RunManifest, RunOptions, Sample, Split, StageRecord, StyleSeparation, MANIFEST_FILE, REPORT_FILE,
};
pub use sweep::{ablation_sweep, SweepAxis, SweepOverride, SweepRow, SweepTable};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GESTUREGEN_OUT";
