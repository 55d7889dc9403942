//! Metrics, the experiment matrix and report emission.

mod experiment;
mod metrics;
mod report;

pub use experiment::{
    apply_correction, evaluate_cells, render_dataset, render_test_set, run_experiment,
    run_experiment_full, train_models, Correction, Countermeasure, ExperimentConfig,
    ExperimentOutcome,
};
pub use metrics::{char_accuracy, mean_char_accuracy, word_accuracy};
pub use report::{
    align, emit_report, read_report_csv, render_svg, report_csv, ConfusionKey, EvalReport,
    ReportRow, CHART_FILE, CONFUSION_FILE, REPORT_FILE,
};
