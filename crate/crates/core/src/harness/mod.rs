//! Phantoms, experiment orchestration, metrics and exports.

pub mod config;
pub mod experiment;
pub mod export;
pub mod phantom;

pub use config::{DictionaryGrids, ExperimentConfig, GeometricRange, Method, NnParams, TwoStepParams};
pub use experiment::{
    evaluate, experiment_dictionary, iteration_count, load_phantom, reconstruct, run_experiment, simulate, Acquisition, ExperimentOutput,
    Trace,
};
pub use export::{export_csv, export_pgm, read_metrics_csv, MetricsRow, Window};
pub use phantom::{make_phantom, Ellipse, Phantom, PhantomSpec, Tissue};
