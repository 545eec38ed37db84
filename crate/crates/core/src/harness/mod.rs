//! Desk-scale continual-learning benchmark used to check the selector
//! against a grid search over qualities.

mod continual;
mod metrics;
mod synthetic;

pub use continual::{
    benchmark, grid_search, rank_phase, rows_to_csv, run_continual, select_on_synthetic, BenchmarkReport, BenchmarkRow,
    ContinualRun, GridResult, GridRow, HarnessError, ReplayPlan, SelectionRun,
};
pub use metrics::{averaged_forgetting, averaged_incremental_accuracy, MetricsError, PhaseMetrics};
pub use synthetic::{class_label, generate_synthetic, SyntheticConfig, SyntheticDataset, PAYLOAD_BYTES, TEST_FRACTION};

/// Per-class budget of the default benchmark, in equivalent originals.
pub const DEFAULT_BUDGET_K: u64 = 8;
