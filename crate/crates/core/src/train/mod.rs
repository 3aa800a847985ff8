//! Training loop, evaluation runner and the artifact exporters behind the CLI.

mod config;
mod runner;
mod trainer;

pub use config::{cosine_lr, EvalSection, NetworkSection, TrainConfig, SEED_ENV};
pub use runner::{
    ablate, ablation_table, checkpoint_eval_params, evaluate, evaluate_network, load_network, predict, synth, visualize, AblationMode,
    AblationResult, AblationRow, SynthSummary, REPORT_FILE, TABLE_HEADER,
};
pub use trainer::{
    checkpoint_name, read_log, train, train_on, EpochRecord, RunManifest, TrainOptions, TrainOutcome, FINAL_CHECKPOINT,
    LOG_FILE, MANIFEST_FILE,
};
