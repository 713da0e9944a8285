//! Extended gravity regressions: dataset assembly, standardization, streaming
//! least squares, sample splits, descriptive tables and the sophistication
//! trend test.

mod classify;
mod dataset;
mod ols;
mod report;
mod split;
mod standardize;
mod stats;
mod trend;

pub use classify::{
    classify_exporter, classify_exporter_with, load_concordance_csv, map_lall, read_concordance_csv,
    Concordance, CoverageReport, ExporterClass, ExporterThresholds, LallCategory, SPECIAL_SITC3,
};
pub use dataset::{
    build_dataset, pooled_base_years, AssemblySource, DatasetOptions, DatasetReport, GravityDataset,
    GravityObservation, RowSource, ZeroPolicy,
};
pub use ols::{fit_ols, fit_source, Coefficient, OlsAccumulator, RegressionResult};
pub use report::{
    read_reports_json, regression_table_csv, write_reports_json, RegressionReport, ReportCoefficient,
};
pub use split::{fit_sample, run_split_regressions, FitOptions, SkippedCell, Split, SplitOutcome};
pub use standardize::{standardize, ColumnScale, StandardizationSpec};
pub use stats::{
    correlation_matrix, summary_stats, write_correlation_csv, write_summary_csv, CorrelationMatrix,
    SummaryRow,
};
pub use trend::{trend_table, trend_table_reports, trend_test, write_trend_csv, TrendResult, TrendRow};

/// Number of regressors (slopes) in the model.
pub const N_REGRESSORS: usize = 15;

/// Regressor columns in model order.
pub const REGRESSOR_NAMES: [&str; N_REGRESSORS] = [
    "omega",
    "omega_d",
    "omega_o",
    "log_x_opd",
    "log_x_op",
    "log_x_pd",
    "log_distance",
    "log_gdp_o",
    "log_gdp_d",
    "log_pop_o",
    "log_pop_d",
    "border",
    "colony",
    "language",
    "log_lang_proximity",
];

pub const RESPONSE_NAME: &str = "log_x_opd_t2";
pub const INTERCEPT_NAME: &str = "intercept";

/// Dummy columns; never standardized.
pub const BINARY_COLUMNS: [usize; 3] = [11, 12, 13];

pub fn is_binary(column: usize) -> bool {
    BINARY_COLUMNS.contains(&column)
}

/// Intercept followed by the regressors: the coefficient order of every fit.
pub fn coefficient_names() -> Vec<String> {
    std::iter::once(INTERCEPT_NAME)
        .chain(REGRESSOR_NAMES)
        .map(String::from)
        .collect()
}
