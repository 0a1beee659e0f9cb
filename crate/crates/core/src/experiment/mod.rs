//! Run configuration, the pre-train / fine-tune / evaluate pipeline, the
//! command implementations and the grid runner.

mod commands;
mod config;
mod grid;
mod pipeline;

pub use commands::{cmd_benchmark, cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_synth, RunContext};
pub use config::{resolve_axis, BenchmarkConfig, ExperimentConfig, RunConfig, AXIS_ALIASES};
pub use grid::{cmd_grid, grid_cells, summarize, summary_table, summary_tsv, CellSummary, GridCell};
pub use pipeline::{
    encoder_similarity_gap, evaluate_model, finetune_run, full_run, labeled_subset, pretrain_run, Corpus, Prediction,
    RunOutcome,
};
