//! Two-stage experiments: base-domain training, few-shot fine-tuning with
//! the four ablation switches, evaluation on a held-out query split, and the
//! ablation grid.

mod ablation;
mod checkpoint;
mod config;
mod plot;
mod stages;

pub use ablation::{ablation_rows, median, run_ablation, AblationOutcome, CellMetrics, CellResult, RESULTS_HEADER};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AblationSettings, DatasetSource, ExperimentConfig, StageConfig, Toggles, SEED_ENV};
pub use plot::pr_curve_svg;
pub use stages::{
    evaluate, fine_tune, fresh_detector, load_source, prepare_target, run_experiment, sample_support, starting_model,
    train_base, ExperimentResult, StageResult, TargetSplit,
};
