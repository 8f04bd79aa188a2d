//! Experiment harness for the prosumer market simulator: TOML
//! configuration, PV caps from CSV or a seeded generator, and the runner
//! that writes iteration traces, welfare comparisons and plot series.

pub mod config;
pub mod error;
pub mod experiment;
pub mod pv;

pub use config::{ExperimentConfig, PvSource, SolverSection};
pub use error::{HarnessError, Result};
pub use experiment::{resolve_pv, run_experiment, simulate, write_outputs, Condition, ExperimentOutcome};
pub use pv::{generate_pv_synthetic, load_pv_csv, load_pv_csv_for, PvProfileSet};
