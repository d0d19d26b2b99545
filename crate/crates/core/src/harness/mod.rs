//! Training with early stopping, leave-one-subject-out evaluation, the
//! ablation matrix and report serialisation.

mod ablation;
mod loso;
mod report;
mod streams;
mod train;
mod verify;

pub use ablation::{ablation_configs, run_ablation, AblationReport, AblationRow, AblationTable};
pub use loso::{run_lambda_sweep, run_loso, train_all, FoldResult, LosoReport, RunOptions};
pub use report::{emit_report, render_report, Report, ReportFormat};
pub use streams::{
    dynamic_image, prepare, DualFull, DualPhase, SingleFull, SingleOffset, SingleOnset, StreamInputs, StreamRegistry,
};
pub use train::{
    evaluate, init_model, train_fold, DiCache, EpochRecord, FoldContext, Sample, TrainConfig, TrainHistory,
};
pub use verify::{gradcheck_model, gradcheck_model_f32};
