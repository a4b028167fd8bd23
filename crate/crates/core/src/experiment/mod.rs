//! Config files, output directories and the end-to-end commands.

mod config;
mod data;
mod pipeline;

pub use config::{ExperimentConfig, Overrides, SystemConfig};
pub use data::{inventory, read_manifest, DataDir, FileEntry, Layout, Manifest, Seeds, TruthPolicy, MANIFEST};
pub use pipeline::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_refine, cmd_train, write_manifest, AblationRow, EvalReport, GenReport,
    TrainOptions, TrainReport, ABLATION_VARIANTS,
};
