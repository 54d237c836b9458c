//! Benchmark metrics: Chamfer and F1 on surface samples, multi-view pixel
//! distance, ICP alignment, no-edit detection and report assembly.

mod bench;
mod icp;
mod metrics;

pub use bench::{
    aggregate_rows, evaluate_predictions, plot_data, predict, request_seed, run_benchmark, Aggregate, BenchConfig,
    MetricReport, MetricRow, EDIT_CHUNK,
};
pub use icp::{fit_similarity, icp_align, IcpOptions, IcpResult, Similarity};
pub use metrics::{
    chamfer, edit_magnitude, f1_score, is_no_edit, no_edit_rate, palette_changes, view_distance, NoEditCase,
    NoEditSummary,
};

#[cfg(test)]
mod tests;
