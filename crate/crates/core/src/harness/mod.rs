//! Synthetic-data generation, Monte-Carlo studies, CSV ingestion and reports.

mod config;
mod csv_io;
mod montecarlo;
mod synth;

pub use config::{EmSettings, ExperimentConfig, GenerationNoise, SCHEMA_VERSION};
pub use synth::{
    generate_synthetic, region_names, run_rng, simulate_run_fine, Dataset, FineBold, Provenance, SyntheticRun, Truth,
};
pub use csv_io::{load_bold_csv, parse_bold_csv, write_bold_csv};
pub use montecarlo::{
    cell_metrics, emit_report, quantile, recompute_metrics, run_cells, run_monte_carlo, study_fir_prior, CellMetrics,
    CellRecord, PairRecord, Quartiles, Report, SummaryRow, CELL_METRICS, MAX_FAILURE_FRACTION,
};
