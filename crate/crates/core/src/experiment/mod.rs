//! Config-driven experiment runs: data generation, training with on-disk
//! artifacts, probing saved models, sweeps and the oracle gate.

mod config;
pub mod presets;
mod run;
mod sweep;

pub use config::{DatasetConfig, DatasetKind, ExperimentConfig, SweepSpec};
pub use run::{
    gen_data, load_data, read_model, run_hist, run_probe, run_train, run_verify, write_model, RunSummary, SUMMARY_ECHO,
};
pub use sweep::{grid, mean_std, run_sweep, GridPoint, SweepRow, SWEEP_HEADER};
