//! Width sweeps: train a family of networks of increasing width, probe each
//! at scheduled epochs, and summarise the results.

mod analysis;
mod config;
mod report;
mod run;

pub use analysis::{
    average_ranks, correlate, final_train_rows, find_interpolation_threshold, has_interior_maximum,
    interpolation_threshold, spearman, Correlation, MIN_CORRELATION_POINTS,
};
pub use config::{DataSource, DatasetSpec, Family, SweepConfig, BOUND_IDS, SCHEMA_VERSION};
pub use report::{
    chart_series, column_f64, csv_record, emit_reports, read_results_csv, render_chart, summarize, write_charts,
    write_epochwise_csv, write_history_csv, write_results_csv, BoundSummary, Summary, COLUMNS, DEFAULT_CHARTS,
    METRIC_COLUMNS, SUMMARY_CORRELATIONS,
};
pub use run::{
    run_sweep, run_sweep_with_workers, sort_rows, worker_count, CellRecord, FailedCell, SweepResult, MAX_FAILED_FRACTION, WORKERS_ENV,
};
