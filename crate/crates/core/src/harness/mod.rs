//! Experiment configs, sweeps over trials and target images, and the
//! result files they produce.

mod config;
mod report;
mod sweep;

pub use config::ExperimentConfig;
pub use report::{
    read_csv, write_csv, CSensitivityRow, ResultRow, ResultsTable, SummaryRow, C_SENSITIVITY_FILE, PLOTS_DIR,
    RESULTS_FILE, SUMMARY_FILE,
};
pub use sweep::{
    average_results, c_sensitivity_image, evaluate_image, lambda_label, load_domain, run_sweep, train_trial,
    ImageProtocol, ImageResult, SweepOutcome, TENT_METHOD,
};
